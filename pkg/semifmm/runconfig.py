"""
Run configuration: one JSON file parsed into frozen dataclasses.

Every section is optional in the file; missing keys take the defaults below. Thresholds are
range-checked and all formulas are parsed when the file is loaded, so a bad config fails
before any stage runs.
"""
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from typing_extensions import Self

from .basis import NEAR_LOSSLESS_EPS, WaveletSpec
from .config import logger, output_dir_override, workers_override
from .errors import FormulaError, ValidationError
from .formula import parse_formula
from .mcmc import ChainConfig
from .select import CRITERIA, random_structure
from .utils import PathLike, payload_hash

DEFAULT_FORMULA = "value ~ hyper(iop) + np(age) + (hyper(iop) | eye)"
DEFAULT_FIXED_CANDIDATES = (
    "value ~ hyper(iop)",
    "value ~ hyper(iop) + lin(age)",
    "value ~ hyper(iop) + np(age)",
    "value ~ hyper(iop) + hyper(iop):np(age)",
)
DEFAULT_RANDOM_CANDIDATES = (
    "(1 | eye)",
    "(hyper(iop) | eye)",
    "(hyper(iop) | eye) + (1 | subject)",
)
DEFAULT_LEVELS = (7.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0)
DEFAULT_AGES = tuple(20.0 + i for i in range(71))
AUC_RANGE = (7.0, 45.0)
SCENARIOS = ("null", "linear", "nonparametric", "linear_random", "glaucoma")


def _known(cls, payload: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    payload = dict(payload or {})
    unknown = sorted(set(payload) - set(cls.__dataclass_fields__))
    if unknown:
        logger.warning(f"⚠️ Ignoring unknown {cls.__name__} keys: {', '.join(unknown)}")
    return {k: v for k, v in payload.items() if k in cls.__dataclass_fields__}


def _check_formula(text: str, where: str) -> None:
    try:
        parse_formula(text)
    except FormulaError as e:
        raise FormulaError(f"{where}: {e.reason}", position=e.position, token=e.token)


@dataclass(frozen=True)
class SelectionConfig:
    fixed_candidates: Tuple[str, ...] = DEFAULT_FIXED_CANDIDATES
    random_candidates: Tuple[str, ...] = DEFAULT_RANDOM_CANDIDATES
    criterion: str = "aBIC"
    df_penalty: bool = True
    smoothness: bool = False
    smoothness_formula: str = "value ~ np(age)"
    lambda_grid: Tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)

    def __post_init__(self):
        object.__setattr__(self, "fixed_candidates", tuple(self.fixed_candidates))
        object.__setattr__(self, "random_candidates", tuple(self.random_candidates))
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        if not self.fixed_candidates or not self.random_candidates:
            raise ValidationError("selection needs at least one fixed and one random candidate", code="empty_candidates")
        if self.criterion not in CRITERIA:
            raise ValidationError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if not self.lambda_grid or min(self.lambda_grid) <= 0:
            raise ValidationError("lambda_grid must be nonempty and positive", code="bad_lambda_grid")
        for i, text in enumerate(self.fixed_candidates):
            _check_formula(text, f"fixed candidate {i}")
        for i, text in enumerate(self.random_candidates):
            try:
                random_structure(text)
            except FormulaError as e:
                raise FormulaError(f"random candidate {i}: {e.reason}", position=e.position, token=e.token)
        _check_formula(self.smoothness_formula, "smoothness_formula")


@dataclass(frozen=True)
class InferenceConfig:
    alpha: float = 0.05
    ages: Tuple[float, ...] = DEFAULT_AGES
    auc_range: Tuple[float, float] = AUC_RANGE
    area_weights: bool = True
    reference_location: Optional[Tuple[float, float]] = None
    df_draws: int = 50
    df_locations: int = 200
    level_ages: Tuple[float, ...] = (30.0, 50.0, 70.0)
    heatmaps: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ages", tuple(float(a) for a in self.ages))
        object.__setattr__(self, "level_ages", tuple(float(a) for a in self.level_ages))
        object.__setattr__(self, "auc_range", tuple(float(v) for v in self.auc_range))
        if self.reference_location is not None:
            object.__setattr__(self, "reference_location", tuple(float(v) for v in self.reference_location))
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if len(self.ages) < 2:
            raise ValidationError("need at least two ages for surfaces")
        if not self.auc_range[0] < self.auc_range[1]:
            raise ValidationError(f"empty AUC range {self.auc_range}")
        if self.df_draws < 1 or self.df_locations < 1:
            raise ValidationError("df_draws and df_locations must be positive")


@dataclass(frozen=True)
class SimulationConfig:
    scenario: str = "glaucoma"
    n_meridional: int = 32
    n_circumferential: int = 32
    theta_range: Tuple[float, float] = (9.0, 24.0)
    n_subjects: int = 19
    n_units: int = 34
    serial_levels: Tuple[float, ...] = DEFAULT_LEVELS
    age_range: Tuple[float, float] = (20.0, 90.0)
    effect_scale: float = 1.0
    unit_sd: float = 0.3
    subject_sd: float = 0.0
    noise_sd: float = 0.1
    decay: float = 2.0
    spike_units: int = 0
    spike_magnitude: float = 1e6
    from_fit: bool = False
    fit_ages: Tuple[float, ...] = (30.0, 50.0, 70.0)

    def __post_init__(self):
        for name in ("theta_range", "serial_levels", "age_range", "fit_ages"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not self.n_subjects <= self.n_units <= 2 * self.n_subjects:
            raise ValidationError(
                f"{self.n_units} eyes cannot be spread over {self.n_subjects} subjects (one or two each)",
                code="bad_design",
            )
        if len(set(self.serial_levels)) < 3 or min(self.serial_levels) <= 0:
            raise ValidationError("need at least 3 distinct positive serial levels", code="too_few_levels")
        if not self.age_range[0] < self.age_range[1]:
            raise ValidationError(f"empty age range {self.age_range}")
        if min(self.unit_sd, self.subject_sd, self.noise_sd, self.decay, self.effect_scale) < 0:
            raise ValidationError("simulation scales must be nonnegative")
        if self.spike_units < 0 or self.spike_magnitude <= 0:
            raise ValidationError("spike_units must be >= 0 and spike_magnitude positive")


@dataclass(frozen=True)
class RunConfig:
    dataset: Optional[str] = None
    output_dir: str = "semifmm-output"
    seed: int = 20231
    workers: int = 1
    wavelet: WaveletSpec = field(default_factory=WaveletSpec)
    energy_threshold: float = 0.995
    spike_ratio: float = 100.0
    epsilon: float = NEAR_LOSSLESS_EPS
    formula: str = DEFAULT_FORMULA
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def __post_init__(self):
        if not 0.0 < self.energy_threshold <= 1.0:
            raise ValidationError(f"energy_threshold must lie in (0, 1], got {self.energy_threshold}")
        if self.spike_ratio <= 1.0:
            raise ValidationError(f"spike_ratio must exceed 1, got {self.spike_ratio}")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        _check_formula(self.formula, "formula")

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["wavelet"] = self.wavelet.to_dict()
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> Self:
        payload = dict(payload)
        sections = {
            "wavelet": WaveletSpec(**_known(WaveletSpec, payload.pop("wavelet", None))),
            "selection": SelectionConfig(**_known(SelectionConfig, payload.pop("selection", None))),
            "inference": InferenceConfig(**_known(InferenceConfig, payload.pop("inference", None))),
            "simulation": SimulationConfig(**_known(SimulationConfig, payload.pop("simulation", None))),
        }
        chain = payload.pop("chain", None) or {}
        chain.setdefault("seed", payload.get("seed", cls.seed))
        sections["chain"] = ChainConfig(**_known(ChainConfig, chain))
        return cls(**_known(cls, payload), **sections)

    def with_overrides(self, *, output_dir: Optional[str] = None, workers: Optional[int] = None) -> Self:
        """Apply CLI flags, then environment variables where no flag was given."""
        env_dir = output_dir_override()
        env_workers = workers_override()
        changes: Dict[str, Any] = {}
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        elif env_dir is not None:
            changes["output_dir"] = str(env_dir)
        if workers is not None:
            changes["workers"] = int(workers)
        elif env_workers is not None:
            changes["workers"] = env_workers
        return replace(self, **changes) if changes else self


def load_config(path: Optional[PathLike] = None) -> RunConfig:
    """Read a run config; no path means all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file {path} does not exist", code="missing_config")
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {path} is not valid JSON: {e}", code="bad_config")
    if not isinstance(payload, dict):
        raise ValidationError(f"config file {path} must hold a JSON object", code="bad_config")
    config = RunConfig.from_dict(payload)
    logger.debug(f"🔧 Loaded config {path} (hash {config_hash(config)[:12]})")
    return config


def config_hash(config: RunConfig) -> str:
    """sha256 of the canonical JSON of the resolved config; output_dir and workers do not count."""
    payload = config.to_dict()
    payload.pop("output_dir", None)
    payload.pop("workers", None)
    return payload_hash(payload)
