"""Pipeline configuration loaded from a TOML file.

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError
from .refine import RefineConfig
from .rerank import RerankConfig
from .retrieval import DEFAULT_B, DEFAULT_K1, DEFAULT_TOP_K


@dataclass
class Paths:
    corpus: Path | None = None
    queries: Path | None = None
    qrels: Path | None = None
    embeddings: Path | None = None
    query_embeddings: Path | None = None
    seeds: Path | None = None
    exclusion: Path | None = None
    templates: Path | None = None
    output: Path = Path("out")


@dataclass
class GatewaySettings:
    backend: str = "http"
    base_url: str | None = None
    api_key_env: str = "LLM_API_KEY"
    student_model: str | None = None
    teacher_model: str | None = None
    reward_model: str | None = None
    max_in_flight: int = 8
    retries: int = 3
    timeout: float = 120.0
    student_fixture: Path | None = None
    teacher_fixture: Path | None = None
    reward_fixture: Path | None = None


@dataclass
class RetrievalSettings:
    mode: str = "bm25"
    k: int = DEFAULT_TOP_K
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B


@dataclass
class DatagenSettings:
    mode: str = "offline"
    search_fixture: Path | None = None
    page_fixture: Path | None = None
    search_api_key_env: str = "SEARCH_API_KEY"
    search_endpoint: str | None = None
    fetch_timeout: float = 15.0
    fetch_max_bytes: int = 2_000_000
    limit: int | None = None
    concurrency: int = 4


@dataclass
class RefineSettings:
    reward_backend: str = "mock"
    reward_url: str | None = None
    reward_fixture: Path | None = None
    iteration_models: list[str] = field(default_factory=list)


@dataclass
class PipelineConfig:
    source: Path | None = None
    seed: int = 0
    domains: list[str] = field(default_factory=list)
    paths: Paths = field(default_factory=Paths)
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    refine_io: RefineSettings = field(default_factory=RefineSettings)
    datagen: DatagenSettings = field(default_factory=DatagenSettings)
    relevance_definitions: dict[str, str] = field(default_factory=dict)
    raw_bytes: bytes = b""
    overrides: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.raw_bytes)
        h.update(json.dumps(self.overrides, sort_keys=True).encode())
        return h.hexdigest()

    def require(self, *names: str) -> list[Path]:
        """Resolve named paths, failing if any is unset or missing on disk."""
        out = []
        for name in names:
            value = getattr(self.paths, name)
            if value is None:
                raise ValidationError(f"config is missing paths.{name}")
            if not Path(value).exists():
                raise ValidationError(f"paths.{name} does not exist: {value}")
            out.append(Path(value))
        return out


_PATH_FIELDS = {
    "paths": {f.name for f in fields(Paths)},
    "gateway": {"student_fixture", "teacher_fixture", "reward_fixture"},
    "datagen": {"search_fixture", "page_fixture"},
    "refine": {"reward_fixture"},
}


def _section(cls, data: dict, name: str, base: Path):
    if not isinstance(data, dict):
        raise ValidationError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    values = {}
    for key, value in data.items():
        if key in _PATH_FIELDS.get(name, ()) and value is not None:
            value = (base / value) if not Path(value).is_absolute() else Path(value)
        values[key] = value
    try:
        return cls(**values)
    except TypeError as exc:
        raise ValidationError(f"[{name}]: {exc}") from None


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: {exc}") from None
    base = path.parent
    cfg = PipelineConfig(source=path, raw_bytes=raw)
    known = {"seed", "domains", "paths", "gateway", "retrieval", "rerank", "refine", "datagen", "relevance_definitions"}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg.seed = int(data.get("seed", 0))
    cfg.domains = list(data.get("domains", []))
    cfg.paths = _section(Paths, data.get("paths", {}), "paths", base)
    if "output" not in data.get("paths", {}):
        cfg.paths.output = base / "out"
    cfg.gateway = _section(GatewaySettings, data.get("gateway", {}), "gateway", base)
    cfg.retrieval = _section(RetrievalSettings, data.get("retrieval", {}), "retrieval", base)
    cfg.rerank = _section(RerankConfig, data.get("rerank", {}), "rerank", base)
    refine = dict(data.get("refine", {}))
    io_keys = {f.name for f in fields(RefineSettings)}
    cfg.refine_io = _section(RefineSettings, {k: refine.pop(k) for k in list(refine) if k in io_keys}, "refine", base)
    cfg.refine = _section(RefineConfig, refine, "refine", base)
    cfg.datagen = _section(DatagenSettings, data.get("datagen", {}), "datagen", base)
    cfg.relevance_definitions = dict(data.get("relevance_definitions", {}))
    _check(cfg)
    return cfg


def _check(cfg: PipelineConfig) -> None:
    if cfg.retrieval.mode not in ("bm25", "dense"):
        raise ValidationError(f"retrieval.mode must be bm25 or dense, got {cfg.retrieval.mode!r}")
    if cfg.retrieval.k < 1:
        raise ValidationError("retrieval.k must be >= 1")
    if cfg.gateway.backend not in ("http", "mock"):
        raise ValidationError(f"gateway.backend must be http or mock, got {cfg.gateway.backend!r}")
    if cfg.datagen.mode not in ("offline", "live"):
        raise ValidationError(f"datagen.mode must be offline or live, got {cfg.datagen.mode!r}")
    if cfg.refine_io.reward_backend not in ("mock", "chat", "http"):
        raise ValidationError("refine.reward_backend must be mock, chat or http")


def with_overrides(cfg: PipelineConfig, **flags) -> PipelineConfig:
    """Apply CLI flags (None means not given); flags win over file values."""
    flags = {k: v for k, v in flags.items() if v is not None}
    cfg.overrides = dict(flags)
    if "seed" in flags:
        cfg.seed = flags["seed"]
    if "out" in flags:
        cfg.paths.output = Path(flags["out"])
    if "limit" in flags:
        cfg.datagen.limit = flags["limit"]
    if "alpha" in flags:
        cfg.rerank = replace(cfg.rerank, alpha=flags["alpha"])
    refine_changes = {k: flags[k] for k in ("tau", "m") if k in flags}
    if refine_changes:
        cfg.refine = replace(cfg.refine, **refine_changes)
    return cfg


def describe(cfg: PipelineConfig) -> dict:
    """JSON-safe view of the effective config (no absolute paths)."""

    def clean(obj):
        if isinstance(obj, Path):
            return obj.name
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        return obj

    return clean(
        {
            "seed": cfg.seed,
            "retrieval": asdict(cfg.retrieval),
            "rerank": asdict(cfg.rerank),
            "refine": asdict(cfg.refine),
        }
    )
