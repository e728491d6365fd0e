"""
Stage orchestration: simulate -> transform -> select -> fit -> infer -> diagnose.

Each stage reads the artifacts of the stages before it (verified against their manifests),
writes its own under `<output>/<stage>/`, records a manifest and a row in the run registry.
A stage whose manifest already matches the config and inputs is skipped unless forced.
"""
import asyncio
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .artifacts import ArtifactStore, RunManifest
from .basis import BasisSystem, build_basis
from .config import logger
from .dataset import FunctionalDataset, ingest, save_dataset
from .design import DesignBundle, assemble
from .diagnostics import diagnose, summarize
from .errors import ConvergenceError, FmmError, NumericalError, ValidationError
from .formula import parse_formula
from .inference import (
    MIDPERIPHERAL,
    PERIPAPILLARY,
    BandSummary,
    PosteriorSurface,
    StackedPosterior,
    ages_in_range,
    aggregate,
    auc,
    auc_derivative,
    back_project,
    data_space_variances,
    df_map,
    induced_correlation_maps,
    joint_band,
    np_surface,
    serial_correlation,
    serial_mean_surface,
    stack_bands,
    stack_posteriors,
    write_band_csv,
)
from .lmmfit import LmmFit, fit_reml
from .mcmc import CoefficientPosterior, ShrinkageHyper, empirical_bayes, no_shrinkage, run_all
from .render import heatmap
from .runconfig import RunConfig, config_hash
from .select import random_structure, render_table, smoothness_compare, two_step_select
from .simulate import scenario_dataset, simulate_from_fit
from .store import RunStore
from .utils import payload_hash, savez_atomic, write_json_atomic, write_text_atomic

DATASET_DIR = "dataset"
PREDICTIVE_DIR = "predictive"
CHAIN_DIR = "chains"
CHAIN_FILE = "coef_{k:05d}.npz"
STRICT_REJECT_FRACTION = 0.1


@dataclass
class StageResult:
    stage: str
    manifest: RunManifest
    run_id: Optional[str] = None
    skipped: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "run_id": self.run_id,
            "skipped": self.skipped,
            "outputs": sorted(self.manifest.outputs),
            "details": self.manifest.details,
            "seconds": self.manifest.timings.get("total"),
        }


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").lower() or "term"


def _reml_column(args) -> Tuple[int, Optional[LmmFit], Optional[str]]:
    k, y, bundle = args
    try:
        return k, fit_reml(y, bundle.X, [b.design for b in bundle.blocks]), None
    except FmmError as e:
        return k, None, str(e)


def reml_starts(coeffs: np.ndarray, bundle: DesignBundle, workers: int = 1) -> Tuple[List[Optional[LmmFit]], Dict[int, str]]:
    """REML fit of every coefficient column; failures are returned per k."""
    tasks = [(k, coeffs[:, k], bundle) for k in range(coeffs.shape[1])]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_reml_column, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_reml_column(t) for t in tasks]
    fits: List[Optional[LmmFit]] = [None] * len(tasks)
    errors = {}
    for k, fit, error in results:
        fits[k] = fit
        if error is not None:
            errors[k] = error
    return fits, errors


def shrinkage_hyper(fits: Sequence[LmmFit], bundle: DesignBundle, set_map: np.ndarray, mode: str) -> ShrinkageHyper:
    """Empirical-Bayes (pi, tau) from REML estimates, or the flat prior when mode is 'none'."""
    if mode == "none":
        return no_shrinkage(bundle.n_fixed, set_map)
    bhat = np.column_stack([f.beta_hat for f in fits])
    V = np.column_stack([np.diag(f.beta_cov) for f in fits])
    return empirical_bayes(bhat, np.maximum(V, 1e-300), set_map)


class Pipeline:
    """Runs the stages of one configured analysis against one output directory."""

    def __init__(self, config: RunConfig, *, strict: bool = False, force: bool = False):
        self.config = config
        self.strict = strict
        self.force = force
        self.hash = config_hash(config)
        self.root = config.output_path
        self.artifacts = ArtifactStore(self.root)
        self.store = RunStore.for_output(self.root)

    # ------------------------------------------------------------------
    # Run bookkeeping

    async def _run(self, stage: str, inputs: Callable[[], List[Path]], work: Callable[[float], RunManifest]) -> StageResult:
        """Skip when current, else run `work` in a thread inside a registry row."""
        await self.store.initialize()
        paths = await asyncio.to_thread(inputs)
        if not self.force and await asyncio.to_thread(self.artifacts.is_current, stage, self.hash, paths):
            logger.info(f"✅ Stage {stage} is current; skipping (use --force to rerun)")
            return StageResult(stage, self.artifacts.read_manifest(stage), skipped=True)
        run_id = await self.store.start_run(stage, self.hash)
        logger.info(f"🔄 Stage {stage} started (run {run_id})")
        try:
            manifest = await asyncio.to_thread(work, time.time())
        except Exception as e:
            await self.store.finish_run(run_id, "failed", message=str(e))
            raise
        await self.store.finish_run(run_id, "completed", manifest_path=self.artifacts.manifest_path(stage))
        return StageResult(stage, manifest, run_id)

    def _outputs(self, stage: str) -> List[Path]:
        manifest = self.artifacts.read_manifest(stage)
        if manifest is None:
            return []
        return [self.artifacts._resolve(key) for key in sorted(manifest.outputs)]

    # ------------------------------------------------------------------
    # Loaders

    def dataset_dir(self) -> Path:
        if self.config.dataset:
            return Path(self.config.dataset)
        simulated = self.root / "simulate" / DATASET_DIR
        if simulated.exists():
            return simulated
        raise ValidationError("no dataset configured and none simulated; set `dataset` or run `semifmm simulate`",
                              code="missing_dataset")

    def _dataset_files(self) -> List[Path]:
        directory = self.dataset_dir()
        if directory.is_file():
            return [directory]
        return sorted(p for p in directory.iterdir() if p.is_file())

    def load_transform(self) -> Tuple[FunctionalDataset, BasisSystem, np.ndarray, np.ndarray]:
        """Dataset, basis, N x K coefficients and regularization set map of a verified transform."""
        self.artifacts.load("transform", config_hash=self.hash)
        dataset = ingest(self.dataset_dir())
        basis = BasisSystem.load(self.artifacts.path("transform", "basis.npz"))
        with np.load(self.artifacts.path("transform", "coefficients.npz"), allow_pickle=False) as archive:
            coeffs, sets = archive["coefficients"], archive["sets"]
        if coeffs.shape != (dataset.n_functions, basis.K):
            raise ValidationError(f"coefficients {coeffs.shape} do not match {dataset.n_functions} functions x K={basis.K}",
                                  code="dimension_mismatch")
        return dataset, basis, coeffs, sets

    def load_posteriors(self) -> List[CoefficientPosterior]:
        manifest = self.artifacts.load("fit", config_hash=self.hash)
        paths = sorted(self.artifacts._resolve(key) for key in manifest.outputs if f"/{CHAIN_DIR}/" in f"/{key}")
        if not paths:
            raise ValidationError("fit stage recorded no posteriors", code="empty_posterior")
        return [CoefficientPosterior.load(p) for p in paths]

    def bundle(self, dataset: FunctionalDataset) -> DesignBundle:
        return assemble(dataset, self.config.formula)

    # ------------------------------------------------------------------
    # simulate

    async def simulate(self, *, from_fit: Optional[bool] = None) -> StageResult:
        from_fit = self.config.simulation.from_fit if from_fit is None else from_fit
        if from_fit:
            return await self._run("simulate", self._predictive_inputs, self._simulate_from_fit)
        return await self._run("simulate", lambda: [], self._simulate_scenario)

    def _simulate_scenario(self, started: float) -> RunManifest:
        sim_config = self.config.simulation
        result = scenario_dataset(sim_config, self.config.seed, self.config.wavelet)
        directory = self.artifacts.path("simulate", DATASET_DIR)
        written = save_dataset(result.dataset, directory)
        truth = self.artifacts.path("simulate", "truth.npz")
        savez_atomic(truth, **{name: values for name, values in sorted(result.surfaces.items())})
        summary = self.artifacts.path("simulate", "truth.json")
        write_json_atomic(summary, dict(result.truth_summary(), scenario=sim_config.scenario,
                                        dataset=result.dataset.summary()))
        logger.info(f"✅ Simulated {result.dataset.n_functions} functions ({sim_config.scenario})")
        return self.artifacts.record(
            "simulate", config_hash=self.hash, started=started,
            outputs=[*written, truth, summary],
            seeds={"simulation": self.config.seed},
            details={"scenario": sim_config.scenario, "from_fit": False, "formula": result.formula},
        )

    def _predictive_inputs(self) -> List[Path]:
        return self._outputs("transform") + self._outputs("fit")

    def _simulate_from_fit(self, started: float) -> RunManifest:
        sim_config = self.config.simulation
        dataset, basis, _, _ = self.load_transform()
        stacked = stack_posteriors(self.load_posteriors())
        new = simulate_from_fit(stacked, self.bundle(dataset), basis, sim_config.fit_ages, sim_config.serial_levels,
                                self.config.seed, grid=dataset.grid, serial_name=dataset.serial_name)
        written = save_dataset(new, self.artifacts.path("simulate", PREDICTIVE_DIR))
        logger.info(f"✅ Posterior-predictive dataset: {new.n_functions} functions")
        return self.artifacts.record(
            "simulate", config_hash=self.hash, started=started,
            inputs=self._predictive_inputs(), outputs=written,
            seeds={"simulation": self.config.seed},
            details={"from_fit": True, "ages": list(sim_config.fit_ages), "levels": list(sim_config.serial_levels)},
        )

    # ------------------------------------------------------------------
    # transform

    async def transform(self) -> StageResult:
        return await self._run("transform", self._dataset_files, self._transform)

    def _transform(self, started: float) -> RunManifest:
        config = self.config
        dataset = ingest(self.dataset_dir())
        t0 = time.monotonic()
        basis, coeffs, report = build_basis(dataset.values, config.wavelet, spike_ratio=config.spike_ratio,
                                            energy_threshold=config.energy_threshold, epsilon=config.epsilon)
        seconds = time.monotonic() - t0
        basis_path = self.artifacts.path("transform", "basis.npz")
        coeff_path = self.artifacts.path("transform", "coefficients.npz")
        report_path = self.artifacts.path("transform", "report.json")
        sets = basis.regularization_sets(config.chain.min_set_size)
        basis.save(basis_path)
        savez_atomic(coeff_path, coefficients=coeffs, weights=basis.weights, sets=sets)
        write_json_atomic(report_path, {
            "basis": report.to_dict(),
            "K": basis.K,
            "n_sets": int(np.unique(sets).size),
            "wavelet": config.wavelet.to_dict(),
            "dataset": dataset.summary(),
        })
        logger.info(f"📊 Basis: K={basis.K} of {report.n_full} (ratio {report.compression_ratio:.1f})")
        return self.artifacts.record(
            "transform", config_hash=self.hash, started=started,
            inputs=self._dataset_files(), outputs=[basis_path, coeff_path, report_path],
            timings={"basis": round(seconds, 3)},
            details={"K": basis.K, "T": basis.T, "n_functions": dataset.n_functions},
        )

    # ------------------------------------------------------------------
    # select

    async def select(self) -> StageResult:
        return await self._run("select", lambda: self._outputs("transform"), self._select)

    def _select(self, started: float) -> RunManifest:
        selection = self.config.selection
        dataset, basis, coeffs, _ = self.load_transform()
        result = two_step_select(selection.fixed_candidates, selection.random_candidates, dataset, coeffs,
                                 basis.weights, criterion=selection.criterion, df_penalty=selection.df_penalty,
                                 workers=self.config.workers)
        reports = list(result.reports)
        random_text = "" if result.best_random == "none" else result.best_random
        selected = parse_formula(result.best_fixed).with_random(random_structure(random_text).random_levels)
        payload: Dict[str, Any] = dict(result.to_dict(), selected_formula=selected.to_formula())
        if selection.smoothness:
            smooth = smoothness_compare(coeffs, dataset, selection.smoothness_formula, selection.lambda_grid,
                                        basis.weights, criterion=selection.criterion)
            reports.append(smooth)
            payload["smoothness"] = smooth.to_dict()
        json_path = self.artifacts.path("select", "selection.json")
        text_path = self.artifacts.path("select", "selection.txt")
        write_json_atomic(json_path, payload)
        write_text_atomic(text_path, "\n\n".join(render_table(r) for r in reports) + "\n")
        logger.info(f"✅ Selected {payload['selected_formula']}")
        return self.artifacts.record(
            "select", config_hash=self.hash, started=started,
            inputs=self._outputs("transform"), outputs=[json_path, text_path],
            details={"selected_formula": payload["selected_formula"], "criterion": selection.criterion},
        )

    # ------------------------------------------------------------------
    # fit

    def _fit_key(self) -> str:
        """Registry key of fit runs: the config hash bound to the exact transform outputs."""
        manifest = self.artifacts.read_manifest("transform")
        return payload_hash({"config": self.hash, "transform": manifest.outputs if manifest else {}})

    async def fit(self, *, resume: bool = False) -> StageResult:
        await self.store.initialize()
        stage = "fit"
        inputs = await asyncio.to_thread(self._outputs, "transform")
        if not (self.force or resume) and await asyncio.to_thread(self.artifacts.is_current, stage, self.hash, inputs):
            logger.info("✅ Stage fit is current; skipping (use --force to rerun)")
            return StageResult(stage, self.artifacts.read_manifest(stage), skipped=True)
        key = self._fit_key()
        done = await self.store.resumable_checkpoints(key) if resume else {}
        run_id = await self.store.start_run(stage, key)
        started = time.time()
        try:
            manifest = await self._fit(run_id, started, inputs, done)
        except Exception as e:
            await self.store.finish_run(run_id, "failed", message=str(e))
            raise
        await self.store.finish_run(run_id, "completed", manifest_path=self.artifacts.manifest_path(stage))
        return StageResult(stage, manifest, run_id)

    def _prepare_fit(self):
        config = self.config
        dataset, basis, coeffs, sets = self.load_transform()
        bundle = self.bundle(dataset)
        t0 = time.monotonic()
        starts, errors = reml_starts(coeffs, bundle, config.workers)
        if errors:
            raise NumericalError(f"REML failed for {len(errors)} coefficient(s), first k={min(errors)}: "
                                 f"{errors[min(errors)]}", code="reml_failure")
        unconverged = [k for k, f in enumerate(starts) if not f.converged]
        if unconverged:
            message = f"REML did not converge for {len(unconverged)} of {len(starts)} coefficients"
            if self.strict:
                raise ConvergenceError(message)
            logger.warning(f"⚠️ {message}; continuing with the best iterates")
        hyper = shrinkage_hyper(starts, bundle, sets, config.chain.shrinkage)
        reml_path = self.artifacts.path("fit", "reml.npz")
        savez_atomic(
            reml_path,
            beta=np.column_stack([f.beta_hat for f in starts]),
            variances=np.column_stack([f.variances for f in starts]),
            converged=np.array([f.converged for f in starts]),
        )
        hyper_path = self.artifacts.path("fit", "hyper.json")
        write_json_atomic(hyper_path, dict(hyper.to_dict(), fixed_names=bundle.fixed_names,
                                           shrinkage=config.chain.shrinkage))
        timing = round(time.monotonic() - t0, 3)
        return dataset, coeffs, bundle, starts, hyper, [reml_path, hyper_path], len(unconverged), timing

    async def _fit(self, run_id: str, started: float, inputs: List[Path], done: Dict[int, str]) -> RunManifest:
        config = self.config
        dataset, coeffs, bundle, starts, hyper, extra, n_unconverged, reml_seconds = await asyncio.to_thread(self._prepare_fit)
        chain_dir = self.artifacts.path("fit", CHAIN_DIR)
        chain_dir.mkdir(parents=True, exist_ok=True)
        K = coeffs.shape[1]
        paths: Dict[int, Path] = {}
        for k, path in sorted(done.items()):
            if k < K:
                paths[k] = Path(path)
                await self.store.add_checkpoint(run_id, k, path)
        if paths:
            logger.info(f"📥 Resuming: {len(paths)} of {K} chains already complete")
        remaining = [k for k in range(K) if k not in paths]
        chunk = max(1, 4 * config.workers)
        failures: Dict[int, str] = {}
        t0 = time.monotonic()
        for i in range(0, len(remaining), chunk):
            batch = await asyncio.to_thread(run_all, coeffs, bundle, hyper, config.chain, starts=starts,
                                            indices=remaining[i:i + chunk], workers=config.workers)
            for k, posterior in sorted(batch.posteriors.items()):
                path = chain_dir / CHAIN_FILE.format(k=k)
                await asyncio.to_thread(posterior.save, path)
                await self.store.add_checkpoint(run_id, k, path)
                paths[k] = path
            failures.update(batch.errors)
            logger.info(f"💾 {len(paths)}/{K} chains checkpointed")
        if failures:
            failure_path = self.artifacts.path("fit", "failures.json")
            await asyncio.to_thread(write_json_atomic, failure_path, {str(k): v for k, v in sorted(failures.items())})
            raise NumericalError(f"{len(failures)} chain(s) failed (see {failure_path}); "
                                 f"fix the cause and rerun with --resume", code="chain_failure")
        stale = self.artifacts.path("fit", "failures.json")
        if stale.exists():
            stale.unlink()
        outputs = extra + [paths[k] for k in range(K)]
        return await asyncio.to_thread(
            self.artifacts.record, "fit",
            config_hash=self.hash, started=started, inputs=inputs, outputs=outputs,
            seeds={"chain": config.chain.seed},
            timings={"reml": reml_seconds, "chains": round(time.monotonic() - t0, 3)},
            details={
                "K": K,
                "formula": config.formula,
                "fixed_names": bundle.fixed_names,
                "vc_names": bundle.vc_names,
                "n_saved": config.chain.n_saved,
                "reml_unconverged": n_unconverged,
                "resumed": len(done),
            },
        )

    # ------------------------------------------------------------------
    # infer

    async def infer(self) -> StageResult:
        return await self._run("infer", lambda: self._outputs("transform") + self._outputs("fit"), self._infer)

    def _infer(self, started: float) -> RunManifest:
        dataset, basis, _, _ = self.load_transform()
        stacked = stack_posteriors(self.load_posteriors())
        bundle = self.bundle(dataset)
        writer = _InferenceWriter(self, dataset, basis, stacked, bundle)
        writer.run()
        index_path = self.artifacts.path("infer", "summary.json")
        write_json_atomic(index_path, {"n_draws": stacked.n_draws, "K": stacked.K, "alpha": self.config.inference.alpha,
                                       "outputs": writer.summary})
        return self.artifacts.record(
            "infer", config_hash=self.hash, started=started,
            inputs=self._outputs("transform") + self._outputs("fit"),
            outputs=writer.written + [index_path],
            details={"n_outputs": len(writer.written), "n_draws": stacked.n_draws},
        )

    # ------------------------------------------------------------------
    # diagnose

    async def diagnose(self) -> StageResult:
        return await self._run("diagnose", lambda: self._outputs("fit"), self._diagnose)

    def _diagnose(self, started: float) -> RunManifest:
        dataset = ingest(self.dataset_dir())
        bundle = self.bundle(dataset)
        spline_columns = [info.fixed_column for info in bundle.spline_terms]
        posteriors = {p.k: p for p in self.load_posteriors()}
        results = {k: diagnose(p, spline_columns) for k, p in posteriors.items()}
        summaries = summarize(results, posteriors)
        json_path = self.artifacts.path("diagnose", "diagnostics.json")
        csv_path = self.artifacts.path("diagnose", "diagnostics.csv")
        write_json_atomic(json_path, {
            "groups": {g: s.to_dict() for g, s in summaries.items()},
            "n_coefficients": len(posteriors),
            "stalls": int(sum(p.n_stalls for p in posteriors.values())),
            "kept_stalls": int(sum(p.kept_stalls for p in posteriors.values())),
        })
        lines = ["k,parameter,group,z,p,ess,zero_variance"]
        for k in sorted(results):
            for d in results[k]:
                lines.append(f"{k},{d.name},{d.group},{d.z:.6g},{d.p:.6g},{d.ess:.6g},{int(d.zero_variance)}")
        write_text_atomic(csv_path, "\n".join(lines) + "\n")
        rejected = summaries["all"].fraction_p_below_05
        if rejected > STRICT_REJECT_FRACTION:
            message = f"{rejected:.1%} of Geweke tests reject at 0.05"
            if self.strict:
                raise ConvergenceError(message)
            logger.warning(f"⚠️ {message}; consider longer chains")
        return self.artifacts.record(
            "diagnose", config_hash=self.hash, started=started,
            inputs=self._outputs("fit"), outputs=[json_path, csv_path],
            details={"fraction_p_below_05": rejected, "median_ess": summaries["all"].median_ess},
        )

    # ------------------------------------------------------------------

    async def status(self) -> Dict[str, Any]:
        await self.store.initialize()
        return {
            "output_dir": str(self.root),
            "config_hash": self.hash,
            "stages": await asyncio.to_thread(self.artifacts.status),
            "runs": await self.store.list_runs(limit=20),
        }


@dataclass
class _InferenceWriter:
    """Writes every inference output of one fit; `written` and `summary` collect the results."""

    pipeline: Pipeline
    dataset: FunctionalDataset
    basis: BasisSystem
    stacked: StackedPosterior
    bundle: DesignBundle
    written: List[Path] = field(default_factory=list)
    summary: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    @property
    def settings(self):
        return self.pipeline.config.inference

    def _path(self, name: str) -> Path:
        return self.pipeline.artifacts.path("infer", name)

    def _band(self, name: str, band: BandSummary, *, locations=None, slice_labels=None, grid=True) -> None:
        path = write_band_csv(self._path(f"{name}.csv"), band, self.dataset.grid if grid else None,
                              locations, slice_labels)
        self.written.append(path)
        self.summary[name] = {"critical": band.critical, "n_zero_sd": int(np.sum(band.zero_sd))}

    def _heatmap(self, name: str, surface: np.ndarray, **kwargs) -> None:
        if self.settings.heatmaps:
            self.written.append(heatmap(surface, self.dataset.grid, self._path(f"{name}.png"), **kwargs))

    def _per_age(self, name: str, make: Callable[[float], PosteriorSurface], ages: Sequence[float]) -> List[PosteriorSurface]:
        """Joint band per age (each over all locations), written as one CSV with an age column."""
        alpha = self.settings.alpha
        surfaces = [make(a) for a in ages]
        band = stack_bands([joint_band(s, alpha) for s in surfaces])
        self._band(name, band, slice_labels=[{"age": float(a)} for a in ages])
        return surfaces

    def _regional(self, name: str, surfaces: Sequence[PosteriorSurface], ages: Sequence[float]) -> None:
        """PP and MP means over ages, jointly banded across ages."""
        area = self.settings.area_weights
        for region in (PERIPAPILLARY, MIDPERIPHERAL):
            try:
                draws = np.stack([aggregate(s, self.dataset.grid, region, area).draws.reshape(s.n_draws, -1)[:, 0]
                                  for s in surfaces], axis=1)
            except ValidationError as e:
                logger.warning(f"⚠️ Skipping {region.name} aggregate of {name}: {e}")
                continue
            band = joint_band(PosteriorSurface(f"{name}@{region.name}", draws[:, :, None]), self.settings.alpha)
            self._band(f"{name}_{region.name.lower()}", band, slice_labels=[{"age": float(a)} for a in ages], grid=False)

    def run(self) -> None:
        self.fixed_effects()
        self.nonparametric()
        self.serial_means()
        self.degrees_of_freedom()
        self.correlations()

    def fixed_effects(self) -> None:
        spline_columns = {info.fixed_column for info in self.bundle.spline_terms}
        for a, name in enumerate(self.stacked.fixed_names):
            if a in spline_columns:
                continue
            surface = back_project(self.stacked.b[:, :, a], self.basis, label=name)
            band = joint_band(surface, self.settings.alpha)
            self._band(f"fixed_{_slug(name)}", band)
            self._heatmap(f"fixed_{_slug(name)}", band.mean)
        logger.info(f"📊 Fixed-effect surfaces for {len(self.stacked.fixed_names) - len(spline_columns)} term(s)")

    def nonparametric(self) -> None:
        serial = self.bundle.serial_bases.get(self.dataset.serial_name)
        for t, info in enumerate(self.bundle.spline_terms):
            slug = _slug(info.label)
            ages = ages_in_range(self.settings.ages, self.bundle, info.covariate)
            if ages.size == 0:
                logger.warning(f"⚠️ No configured ages fall inside the range of {info.label}; skipping its surfaces")
                continue
            surfaces = self._per_age(
                f"np_{slug}", lambda a: np_surface(self.stacked, self.bundle, self.basis, term=t, ages=[a]), ages)
            self._regional(f"np_{slug}", surfaces, ages)
            for a in self.settings.level_ages:
                nearest = int(np.argmin(np.abs(np.asarray(ages) - a)))
                self._heatmap(f"np_{slug}_age{ages[nearest]:g}", surfaces[nearest].mean())
            if info.multiplier is not None:
                continue
            self._per_age(f"dauc_{slug}",
                          lambda a: auc_derivative(self.stacked, self.bundle, self.basis, term=t, ages=[a]), ages)
            if serial is not None and t == 0:
                slopes = [back_project(self.stacked.fixed(f"hyper({self.dataset.serial_name})[{n}]"), self.basis)
                          for n in serial.names if n != "G0"]
                low, high = self.settings.auc_range
                auc_surfaces = [auc(s, slopes, serial, low, high) for s in surfaces]
                band = stack_bands([joint_band(s, self.settings.alpha) for s in auc_surfaces])
                self._band(f"auc_{slug}", band, slice_labels=[{"age": float(a)} for a in ages])
                self._regional(f"auc_{slug}", auc_surfaces, ages)

    def serial_means(self) -> None:
        name = self.dataset.serial_name
        if name not in self.bundle.serial_bases:
            return
        levels = sorted(set(float(v) for v in self.dataset.serial_levels()))
        alpha = self.settings.alpha
        covariate = self.bundle.spline_terms[0].covariate if self.bundle.spline_terms else "age"
        level_ages = ages_in_range(self.settings.level_ages, self.bundle, covariate)
        if level_ages.size == 0:
            logger.warning("⚠️ No level ages fall inside the observed range; skipping serial means")
            return
        bands, labels = [], []
        for level in levels:
            for age in level_ages:
                surface = serial_mean_surface(self.stacked, self.bundle, self.basis, name, [level], ages=[age])
                bands.append(joint_band(surface, alpha))
                labels.append({name: level, "age": float(age)})
        self._band("mean_by_level", stack_bands(bands), slice_labels=labels)

    def degrees_of_freedom(self) -> None:
        if not self.bundle.spline_terms:
            return
        G = self.stacked.n_draws
        draws = np.unique(np.linspace(0, G - 1, min(G, self.settings.df_draws)).round().astype(int))
        locations = np.unique(np.linspace(0, self.basis.T - 1, min(self.basis.T, self.settings.df_locations)).round().astype(int))
        thinned = StackedPosterior(
            b=self.stacked.b[draws], vc=self.stacked.vc[draws], s=self.stacked.s[draws],
            u={label: u[draws] for label, u in self.stacked.u.items()},
            fixed_names=self.stacked.fixed_names, vc_names=self.stacked.vc_names,
        )
        variances = data_space_variances(thinned, self.basis, locations)
        for t, info in enumerate(self.bundle.spline_terms):
            surface = df_map(variances, self.bundle, term=t)
            band = joint_band(surface, self.settings.alpha)
            self._band(f"df_{_slug(info.label)}", band, locations=locations)

    def reference_index(self) -> int:
        grid = self.dataset.grid
        target = self.settings.reference_location
        if target is None:
            return grid.flat_index(grid.n_meridional // 2, 0)
        theta, phi = target
        i = int(np.argmin(np.abs(grid.theta() - theta)))
        j = int(np.argmin(np.abs(grid.phi() - phi)))
        return grid.flat_index(i, j)

    def correlations(self) -> None:
        reference = self.reference_index()
        mean_vc = {name: self.stacked.vc[:, :, h].mean(axis=0) for h, name in enumerate(self.stacked.vc_names)}
        mean_vc["s"] = self.stacked.s.mean(axis=0)
        maps = induced_correlation_maps(mean_vc, self.basis, reference)
        maps_path = self._path("correlation_maps.npz")
        savez_atomic(maps_path, **{_slug(name): values for name, values in maps.items()})
        self.written.append(maps_path)
        for name, values in maps.items():
            self._heatmap(f"correlation_{_slug(name)}", values, limits=(-1.0, 1.0), signed=True)
        payload: Dict[str, Any] = {"reference": reference}
        serial_name = self.dataset.serial_name
        if serial_name in self.bundle.serial_bases:
            psi2 = self.basis.psi[:, reference] ** 2
            level_variances = {name: float(v @ psi2) for name, v in mean_vc.items()}
            levels = sorted(set(float(v) for v in self.dataset.serial_levels()))
            matrix = serial_correlation(level_variances, self.bundle, serial_name, levels)
            payload.update(levels=levels, serial_correlation=matrix.tolist(), level_variances=level_variances)
        json_path = self._path("correlation.json")
        write_json_atomic(json_path, payload)
        self.written.append(json_path)
