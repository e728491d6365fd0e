"""
Replicated simulation studies for model selection and the sampler.

Each study returns a StudyResult holding one outcome dict per replicate plus a summary.
They are slow at their default sizes; tests run them with reduced replicate counts.
"""
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .basis import WaveletSpec, build_basis
from .config import logger
from .design import assemble
from .errors import FmmError
from .mcmc import ChainConfig, no_shrinkage, run_chain
from .runconfig import SimulationConfig
from .select import CandidateModel, fit_candidate, joint_select, smoothness_compare, two_step_select, vote
from .simulate import (
    SCENARIO_FORMULAS,
    DesignFrame,
    PseudoParameters,
    age_profile,
    scenario_dataset,
    simulate_coefficients,
    simulation_rng,
    study_design,
)

SELECTION_SCENARIOS = ("null", "linear", "nonparametric", "linear_random")


@dataclass
class StudyResult:
    name: str
    outcomes: List[Dict[str, object]] = field(default_factory=list)
    summary: Dict[str, object] = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        return {"name": self.name, "outcomes": self.outcomes, "summary": self.summary, "seconds": self.seconds}


def _replicate_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def _rate(outcomes: Sequence[Dict[str, object]], flag: str, **match) -> float:
    rows = [o for o in outcomes if all(o.get(k) == v for k, v in match.items())]
    return float(np.mean([bool(o[flag]) for o in rows])) if rows else float("nan")


# ---------------------------------------------------------------------------
# Four-model selection


def selection_study(
    n_replicates: int = 20,
    *,
    seed: int = 1,
    config: Optional[SimulationConfig] = None,
    wavelet: Optional[WaveletSpec] = None,
    scenarios: Sequence[str] = SELECTION_SCENARIOS,
    criterion: str = "aBIC",
    df_penalty: bool = True,
    energy_threshold: float = 0.995,
    workers: int = 1,
) -> StudyResult:
    """Simulate each scenario, fit all four models per coefficient, record the vote winner."""
    started = time.monotonic()
    base = config or SimulationConfig(unit_sd=0.3)
    wavelet = wavelet or WaveletSpec()
    candidates = [CandidateModel.parse(SCENARIO_FORMULAS[s], id=s) for s in SELECTION_SCENARIOS]
    result = StudyResult("selection")
    for i, scenario in enumerate(scenarios):
        for r in range(n_replicates):
            sim = scenario_dataset(replace(base, scenario=scenario), _replicate_seed(seed, i, r), wavelet)
            basis, coeffs, _ = build_basis(sim.dataset.values, wavelet, energy_threshold=energy_threshold)
            fitted = [fit_candidate(coeffs, sim.dataset, c, df_penalty=df_penalty, workers=workers) for c in candidates]
            report = vote(
                [c.id for c in candidates],
                np.vstack([f.scores(criterion) for f in fitted]),
                basis.weights,
                np.vstack([f.n_par for f in fitted]),
                stage="joint",
                criterion=criterion,
            )
            result.outcomes.append({
                "truth": scenario,
                "replicate": r,
                "K": basis.K,
                "winner": report.best,
                "correct": report.best == scenario,
                "P": report.P,
            })
            logger.info(f"🔄 Selection study {scenario} #{r + 1}/{n_replicates}: chose {report.best}")
    result.summary = {
        s: {
            "correct": _rate(result.outcomes, "correct", truth=s),
            "mean_P": {c.id: float(np.mean([o["P"][c.id] for o in result.outcomes if o["truth"] == s]))
                       for c in candidates},
        }
        for s in scenarios
    }
    result.seconds = time.monotonic() - started
    return result


# ---------------------------------------------------------------------------
# Subject random effect against a nonparametric subject-level covariate


IDENTIFIABILITY_TRUTHS = {
    "subject": ("value ~ 1", "(1 | subject)"),
    "nonparametric": ("value ~ np(age)", ""),
    "both": ("value ~ np(age)", "(1 | subject)"),
}


def _scalar_response(truth: str, frame: DesignFrame, rng: np.random.Generator, *,
                     effect: float, subject_sd: float, noise_sd: float) -> np.ndarray:
    y = np.full(frame.n_functions, 1.0)
    fixed_text, random_text = IDENTIFIABILITY_TRUTHS[truth]
    if "np(" in fixed_text:
        y += effect * age_profile("nonparametric", frame.covariate("age"))
    if random_text:
        subjects = frame.labels("subject")
        groups = sorted(set(subjects))
        draws = dict(zip(groups, rng.standard_normal(len(groups)) * subject_sd))
        y += np.array([draws[g] for g in subjects])
    return y + rng.standard_normal(frame.n_functions) * noise_sd


def identifiability_study(
    n_replicates: int = 20,
    *,
    seed: int = 2,
    truths: Sequence[str] = tuple(IDENTIFIABILITY_TRUTHS),
    effect: float = 1.0,
    subject_sd: float = 0.7,
    noise_sd: float = 0.3,
    criterion: str = "aBIC",
    df_penalty: bool = True,
) -> StudyResult:
    """One scalar coefficient; joint one-step selection against two-step selection."""
    started = time.monotonic()
    fixed = ["value ~ 1", "value ~ np(age)"]
    random = ["", "(1 | subject)"]
    result = StudyResult("identifiability")
    for i, truth in enumerate(truths):
        fixed_text, random_text = IDENTIFIABILITY_TRUTHS[truth]
        joint_id = f"{fixed_text} | {random_text or 'none'}"
        for r in range(n_replicates):
            rng = simulation_rng(_replicate_seed(seed, i, r))
            frame = DesignFrame(study_design(rng))
            y = _scalar_response(truth, frame, rng, effect=effect, subject_sd=subject_sd, noise_sd=noise_sd)
            coeffs, weights = y[:, None], np.ones(1)
            joint = joint_select(fixed, random, frame, coeffs, weights, criterion=criterion, df_penalty=df_penalty)
            two = two_step_select(fixed, random, frame, coeffs, weights, criterion=criterion, df_penalty=df_penalty)
            result.outcomes.append({
                "truth": truth,
                "replicate": r,
                "joint": joint.best,
                "joint_correct": joint.best == joint_id,
                "two_step": [two.best_fixed, two.best_random],
                "two_step_correct": two.best_fixed == fixed_text and two.best_random == (random_text or "none"),
            })
    result.summary = {
        t: {
            "joint_correct": _rate(result.outcomes, "joint_correct", truth=t),
            "two_step_correct": _rate(result.outcomes, "two_step_correct", truth=t),
        }
        for t in truths
    }
    result.seconds = time.monotonic() - started
    return result


# ---------------------------------------------------------------------------
# Common against coefficient-varying smoothness


def smoothness_study(
    n_replicates: int = 20,
    *,
    seed: int = 3,
    varying: bool = True,
    K: int = 20,
    spread: float = 3.0,
    common_lambda: float = 1.0,
    lambda_grid: Sequence[float] = (0.01, 0.1, 1.0, 10.0, 100.0),
    criterion: str = "aBIC",
) -> StudyResult:
    """Spline signals with lambda_k = s_k / q_k either shared or log-uniform over +-spread decades."""
    started = time.monotonic()
    formula = "value ~ np(age)"
    result = StudyResult("smoothness")
    for r in range(n_replicates):
        rng = simulation_rng(_replicate_seed(seed, int(varying), r))
        frame = DesignFrame(study_design(rng))
        bundle = assemble(frame, formula)
        scale = 10.0 ** rng.uniform(-1.0, 1.0, size=K)
        lam = 10.0 ** rng.uniform(-spread, spread, size=K) if varying else np.full(K, common_lambda)
        params = PseudoParameters(
            fixed=np.vstack([np.ones(K), rng.standard_normal(K)])[: bundle.n_fixed],
            vc=scale[None, :],
            s=lam * scale,
        )
        coeffs = simulate_coefficients(params, bundle, rng)
        report = smoothness_compare(coeffs, frame, formula, lambda_grid, np.full(K, 1.0 / K), criterion=criterion)
        chose_varying = report.P["varying"] > 0.5
        result.outcomes.append({
            "replicate": r,
            "P_varying": report.P["varying"],
            "lambda": report.details["lambda"],
            "correct": chose_varying == varying,
        })
    result.summary = {"varying_truth": varying, "correct": _rate(result.outcomes, "correct")}
    result.seconds = time.monotonic() - started
    return result


# ---------------------------------------------------------------------------
# Sampler calibration


def calibration_study(
    n_replicates: int = 20,
    *,
    seed: int = 4,
    chain: Optional[ChainConfig] = None,
    beta: Sequence[float] = (1.0, 0.5, -0.3),
    q: float = 0.2,
    s: float = 0.05,
) -> StudyResult:
    """Known (b, q, s) on one coefficient; is each posterior mean within 3 posterior SDs of truth?"""
    started = time.monotonic()
    chain = chain or ChainConfig(n_burn=1000, n_keep=4000, thin=2, shrinkage="none")
    formula = "value ~ hyper(iop) + (1 | eye)"
    result = StudyResult("calibration")
    for r in range(n_replicates):
        rng = simulation_rng(_replicate_seed(seed, r))
        frame = DesignFrame(study_design(rng))
        bundle = assemble(frame, formula)
        params = PseudoParameters(
            fixed=np.asarray(beta, dtype=float)[:, None],
            vc=np.array([[q]]),
            s=np.array([s]),
        )
        y = simulate_coefficients(params, bundle, rng)[:, 0]
        config = replace(chain, seed=_replicate_seed(seed, r, 1))
        try:
            posterior = run_chain(0, y, bundle, no_shrinkage(bundle.n_fixed, [0]), config)
        except FmmError as e:
            logger.warning(f"⚠️ Calibration replicate {r} failed: {e}")
            result.outcomes.append({"replicate": r, "failed": True, "covered": [], "n_parameters": 0})
            continue
        draws = np.column_stack(list(posterior.parameters().values()))
        truth = np.concatenate([np.asarray(beta, dtype=float), [q, s]])
        mean, sd = draws.mean(axis=0), draws.std(axis=0)
        covered = (np.abs(mean - truth) <= 3.0 * np.maximum(sd, 1e-12)).tolist()
        result.outcomes.append({
            "replicate": r,
            "failed": False,
            "covered": covered,
            "n_parameters": len(covered),
            "acceptance": posterior.acceptance.tolist(),
        })
    flags = [c for o in result.outcomes for c in o["covered"]]
    result.summary = {
        "coverage": float(np.mean(flags)) if flags else float("nan"),
        "failed": sum(1 for o in result.outcomes if o["failed"]),
    }
    result.seconds = time.monotonic() - started
    return result


STUDIES = {
    "selection": selection_study,
    "identifiability": identifiability_study,
    "smoothness": smoothness_study,
    "calibration": calibration_study,
}
