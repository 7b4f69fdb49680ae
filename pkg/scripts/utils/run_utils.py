#!/usr/bin/env python3
"""
Run Utilities

This module contains common functions used by all VM-Rec commands.
It provides utilities for:
1. Loading the run configuration from vmrec_config.json (unknown keys rejected)
2. Resolving the seed (flag, config, VMREC_SEED from the environment or .env, default)
3. The config digest recorded with every report
4. Artifact paths under the output directory and checks that upstream artifacts exist
5. The run manifest (command, digest, package versions, artifact digests)
6. Formatting durations and counts for console output
"""

import os
import json
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from importlib import metadata as importlib_metadata
from pathlib import Path

from dotenv import load_dotenv

from utils.errors import ArtifactError, ConfigError
from utils.datastore import FORMAT_PRESETS
from generation.basemodels import BASE_KINDS, BprConfig
from generation.training import ABLATION_KINDS, DEFAULT_BETAS, DEFAULT_L1_GRID, DEFAULT_PROPORTIONS, TrainConfig

DEFAULT_SEED = 2024
SEED_ENV_VAR = "VMREC_SEED"
CONFIG_FILE = "vmrec_config.json"
PROJECT_ROOT = Path(__file__).resolve().parents[2]
TRACKED_PACKAGES = ("numpy", "torch", "scipy", "pandas")
SWEEP_KINDS = ("beta", "proportion")


@dataclass
class DatasetConfig:
    """Interaction file and its layout; explicit column keys override the preset."""

    path: str = "data/ml-100k/u.data"
    format: str = "movielens-100k"
    delimiter: str = None
    header: bool = None
    user_col: int = None
    item_col: int = None
    time_col: int = None

    def format_options(self):
        if self.format not in FORMAT_PRESETS:
            raise ConfigError(f"unknown dataset.format '{self.format}', expected one of {sorted(FORMAT_PRESETS)}")
        overrides = {f.name: getattr(self, f.name) for f in fields(self)
                     if f.name not in ("path", "format") and getattr(self, f.name) is not None}
        return replace(FORMAT_PRESETS[self.format], **overrides)


@dataclass
class SplitConfig:
    ratios: tuple = (8, 1, 1)


@dataclass
class BaseConfig:
    kind: str = "bpr"
    bpr: BprConfig = field(default_factory=BprConfig)


@dataclass
class EvalConfig:
    shots: tuple = (1, 2, 3)
    n_neg: int = 100
    cutoff: int = 5
    mode: str = "deterministic"
    samples: int = 1
    methods: tuple = ("vmrec", "random", "mean", "rm_init", "rm_cont")
    subset: str = "all"


@dataclass
class AblationConfig:
    kinds: tuple = ABLATION_KINDS
    l1_grid: tuple = DEFAULT_L1_GRID


@dataclass
class DiagnoseConfig:
    max_shots: int = 3
    betas: tuple = DEFAULT_BETAS
    proportions: tuple = DEFAULT_PROPORTIONS
    sweeps: tuple = ()
    grad_check: bool = False
    probe: bool = False


@dataclass
class RunConfig:
    """Everything a command needs; every field has a default."""

    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    seed: int = None
    threads: int = 1
    output_dir: str = "runs/default"

    def to_dict(self):
        return _plain(asdict(self))

    def validate(self):
        if self.base.kind not in BASE_KINDS:
            raise ConfigError(f"base.kind must be one of {BASE_KINDS}, got '{self.base.kind}'")
        if self.eval.mode not in ("deterministic", "stochastic"):
            raise ConfigError(f"eval.mode must be 'deterministic' or 'stochastic', got '{self.eval.mode}'")
        if self.eval.subset not in ("all", "easy", "hard"):
            raise ConfigError(f"eval.subset must be all, easy or hard, got '{self.eval.subset}'")
        if not self.eval.shots or min(self.eval.shots) < 1:
            raise ConfigError("eval.shots needs values >= 1")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        unknown = [k for k in self.ablation.kinds if k not in ABLATION_KINDS]
        if unknown:
            raise ConfigError(f"unknown ablation.kinds {unknown}")
        unknown = [s for s in self.diagnose.sweeps if s not in SWEEP_KINDS]
        if unknown:
            raise ConfigError(f"unknown diagnose.sweeps {unknown}, expected some of {SWEEP_KINDS}")
        self.dataset.format_options()
        try:
            self.base.bpr.validate()
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e))
        return self


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data, prefix):
    """Instantiate a (nested) config dataclass from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"config key '{prefix}' must be an object")
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown config key '{dotted}'")
        nested = _NESTED.get((cls, key))
        if nested is not None:
            value = _build(nested, value, dotted)
        elif isinstance(value, list):
            value = tuple(value)
        values[key] = value
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config section '{prefix or 'root'}': {e}")


_NESTED = {
    (RunConfig, "dataset"): DatasetConfig,
    (RunConfig, "split"): SplitConfig,
    (RunConfig, "base"): BaseConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "ablation"): AblationConfig,
    (RunConfig, "diagnose"): DiagnoseConfig,
    (BaseConfig, "bpr"): BprConfig,
}


def find_config_file():
    """vmrec_config.json in the current directory, else at the project root, else None."""
    for candidate in (Path(CONFIG_FILE), PROJECT_ROOT / CONFIG_FILE):
        if candidate.exists():
            return candidate
    return None


def load_run_config(path=None):
    """
    Load the run configuration. With no path the default config file is used
    when present, otherwise built-in defaults.
    """
    if path is None:
        path = find_config_file()
        if path is None:
            return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}")
    return _build(RunConfig, data, "")


def resolve_seed(flag_seed=None, config_seed=None):
    """--seed, then the config seed, then VMREC_SEED (environment or .env), then 2024."""
    if flag_seed is not None:
        return int(flag_seed)
    if config_seed is not None:
        return int(config_seed)
    load_dotenv()
    env_seed = os.getenv(SEED_ENV_VAR)
    if env_seed:
        try:
            return int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got '{env_seed}'")
    return DEFAULT_SEED


def finalize_config(config, seed=None):
    """Resolve the seed into every section that carries one and validate."""
    resolved = resolve_seed(seed, config.seed)
    config = replace(config, seed=resolved,
                     base=replace(config.base, bpr=replace(config.base.bpr, seed=resolved)),
                     train=replace(config.train, seed=resolved))
    return config.validate()


def config_digest(config):
    """SHA-256 of the canonical JSON of the resolved config."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_digest(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactPaths:
    """Where each command writes under the output directory."""

    def __init__(self, output_dir):
        self.root = Path(output_dir)

    @property
    def split(self):
        return self.root / "split.json"

    @property
    def split_summary(self):
        return self.root / "split_summary.json"

    def base_model(self, kind):
        return self.root / "base" / kind

    def generator(self, base_kind, distribution="spike_slab"):
        return self.root / "generators" / f"{distribution}_{base_kind}.vmpg"

    def training_log(self, base_kind, distribution="spike_slab"):
        return self.root / "generators" / f"{distribution}_{base_kind}.train.jsonl"

    @property
    def results(self):
        return self.root / "results"

    @property
    def ablation(self):
        return self.root / "ablation"

    @property
    def diagnose(self):
        return self.root / "diagnose"

    @property
    def manifest(self):
        return self.root / "run_manifest.json"


def require_artifact(path, producer, what="artifact"):
    """Raise ArtifactError naming the producing command when path is missing."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing {what}: {path}", producer=producer)
    return path


def package_versions():
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = importlib_metadata.version(name)
        except importlib_metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def write_run_manifest(paths, command, config, artifacts=()):
    """
    Record the command, config digest, package versions and artifact digests.
    The timestamp sits under "metadata", the only field that changes between reruns.
    """
    manifest = {}
    if paths.manifest.exists():
        try:
            manifest = json.loads(paths.manifest.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            manifest = {}
    commands = manifest.setdefault("commands", {})
    entry = {
        "config_digest": config_digest(config),
        "seed": config.seed,
        "artifacts": {},
    }
    for artifact in artifacts:
        artifact = Path(artifact)
        targets = sorted(p for p in artifact.rglob("*") if p.is_file()) if artifact.is_dir() else [artifact]
        for target in targets:
            entry["artifacts"][str(target.relative_to(paths.root))] = file_digest(target)
    commands[command] = entry
    manifest["packages"] = package_versions()
    manifest["metadata"] = {"generated_at": datetime.now().strftime("%Y-%m-%d %H:%M:%S")}
    paths.root.mkdir(parents=True, exist_ok=True)
    with open(paths.manifest, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return paths.manifest


def format_duration(seconds):
    """
    Format a duration in seconds to a human-readable string.
    """
    if seconds >= 3600:
        return f"{int(seconds // 3600)}h {int(seconds % 3600 // 60)}m"
    if seconds >= 60:
        return f"{int(seconds // 60)}m {int(seconds % 60)}s"
    return f"{seconds:.1f}s"


def format_count(value, total=None):
    if total:
        return f"{value:,} ({value / total * 100:.2f}%)"
    return f"{value:,}"
