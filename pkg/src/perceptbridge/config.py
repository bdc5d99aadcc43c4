"""Adapter configuration schema, validation, and the preset catalog.

A config selects one point in the design space: backbone dims x
extraction x mapping x injection x fine-tuning x training recipe.
Presets expand in two profiles: "full" carries the published full-scale
values (used analytically by the accounting suite), "desk" rescales
widths and injection windows to fit the trainable toy backbones.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

MAPPER_KINDS = ("linear", "qpmapper", "r-avgpool", "r-linear", "r-qp", "r-rand", "none")
INJECTION_MODES = ("first_layer", "inner", "cross_attn")
CLS_MODES = ("cls", "mean", "all")

PRESET_NAMES = (
    "limber-1",
    "limber-all",
    "mapl",
    "ep-alm",
    "depalm-qp-l0",
    "depalm-qp-inner",
    "depalm-r-avgpool",
    "depalm-r-linear",
    "depalm-r-qp",
    "depalm-r-rand",
    "depalm-c-attn",
)


class ConfigValidationError(ValueError):
    """Names the offending dotted key and the violated constraint."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class ModelDims:
    d_llm: int = 128
    llm_layers: int = 4
    llm_heads: int = 4
    vocab: int = 64
    d_feats: int = 64
    enc_layers: int = 4
    grid: int = 8


@dataclass
class Extraction:
    n_fl: int = 1
    cls_mode: str = "all"


@dataclass
class RandParams:
    f_min: float = 1.0 / 16.0
    f_max: float = 0.5
    f_mean: float = 0.25
    f_std: float = 0.2
    spike_p: float = 0.1
    eval_keep_all: bool = False


@dataclass
class BlockParams:
    l_qp: int = 4  # depth of the per-block pooling mapper (r-qp only)


@dataclass
class Mapping:
    kind: str = "linear"
    d_embed: int | None = None
    l_qp: int | None = None
    n_q: int | None = None
    block: BlockParams | None = None
    rand: RandParams | None = None


@dataclass
class Injection:
    mode: str = "first_layer"
    n_llm: int | None = None
    n_left: int | None = None
    d_embed: int | None = None  # cross-attention latent width
    attn_out_proj: bool = True


@dataclass
class Finetune:
    n_pt: int = 0
    bias_tuning: bool = False


@dataclass
class TrainParams:
    lr_max: float = 8e-4
    min_lr_ratio: float = 1e-4
    warmup_frac: float = 0.2
    weight_decay: float = 0.1
    grad_clip: float = 0.8
    batch: int = 32
    epochs: int = 8
    label_smoothing: float = 2e-3
    seed: int = 0


@dataclass
class AdapterConfig:
    model: ModelDims = field(default_factory=ModelDims)
    extraction: Extraction = field(default_factory=Extraction)
    mapping: Mapping = field(default_factory=Mapping)
    injection: Injection = field(default_factory=Injection)
    finetune: Finetune = field(default_factory=Finetune)
    train: TrainParams = field(default_factory=TrainParams)
    name: str = "custom"

    def to_dict(self) -> dict:
        d = asdict(self)
        _strip_none(d)
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text


def _strip_none(d: dict) -> None:
    for k in list(d):
        if d[k] is None:
            del d[k]
        elif isinstance(d[k], dict):
            _strip_none(d[k])


_SECTIONS = {
    "model": ModelDims,
    "extraction": Extraction,
    "mapping": Mapping,
    "injection": Injection,
    "finetune": Finetune,
    "train": TrainParams,
}


def _build_section(cls, data: dict, path: str):
    allowed = cls.__dataclass_fields__
    kwargs = {}
    for key, value in data.items():
        if key not in allowed:
            raise ConfigValidationError(f"{path}.{key}", "unknown key")
        if key == "rand" and isinstance(value, dict):
            value = _build_section(RandParams, value, f"{path}.rand")
        elif key == "block" and isinstance(value, dict):
            value = _build_section(BlockParams, value, f"{path}.block")
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> AdapterConfig:
    """Build and validate a config from a plain dict; unknown keys rejected."""
    if not isinstance(data, dict):
        raise ConfigValidationError("<root>", "config must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key == "name":
            kwargs["name"] = str(value)
            continue
        if key not in _SECTIONS:
            raise ConfigValidationError(key, "unknown section")
        if not isinstance(value, dict):
            raise ConfigValidationError(key, "section must be an object")
        kwargs[key] = _build_section(_SECTIONS[key], value, key)
    cfg = AdapterConfig(**kwargs)
    validate(cfg)
    return cfg


def from_json(path) -> AdapterConfig:
    with open(path) as f:
        return from_dict(json.load(f))


def _require(cond, key, message):
    if not cond:
        raise ConfigValidationError(key, message)


# fields each mapping kind must set (beyond `kind`); everything else must be unset
_KIND_FIELDS = {
    "linear": set(),
    "qpmapper": {"d_embed", "l_qp", "n_q"},
    "r-avgpool": {"d_embed"},
    "r-linear": {"d_embed"},
    "r-qp": {"d_embed", "block"},
    "r-rand": {"rand"},
    "none": set(),
}


def validate(cfg: AdapterConfig) -> None:
    m = cfg.model
    for key in ("d_llm", "llm_layers", "llm_heads", "vocab", "d_feats", "enc_layers", "grid"):
        _require(getattr(m, key) >= 1, f"model.{key}", "must be a positive integer")
    _require(m.d_llm % m.llm_heads == 0, "model.llm_heads", f"must divide d_llm={m.d_llm}")

    ext = cfg.extraction
    _require(ext.cls_mode in CLS_MODES, "extraction.cls_mode", f"must be one of {CLS_MODES}")
    _require(
        1 <= ext.n_fl <= m.enc_layers,
        "extraction.n_fl",
        f"must be in [1, enc_layers={m.enc_layers}]",
    )

    mp = cfg.mapping
    _require(mp.kind in MAPPER_KINDS, "mapping.kind", f"must be one of {MAPPER_KINDS}")
    needed = _KIND_FIELDS[mp.kind]
    for fname in ("d_embed", "l_qp", "n_q", "block", "rand"):
        val = getattr(mp, fname)
        if fname in needed:
            _require(val is not None, f"mapping.{fname}", f'required when mapping.kind is "{mp.kind}"')
        else:
            _require(val is None, f"mapping.{fname}", f'must be unset when mapping.kind is "{mp.kind}"')
    if mp.kind == "qpmapper":
        _require(mp.d_embed >= 1, "mapping.d_embed", "must be positive")
        _require(mp.l_qp >= 1, "mapping.l_qp", "must be positive")
        _require(mp.n_q >= 1, "mapping.n_q", "must be positive")
    if mp.kind in ("r-avgpool", "r-linear", "r-qp"):
        _require(mp.d_embed >= 1, "mapping.d_embed", "must be positive")
        _require(ext.cls_mode == "all", "extraction.cls_mode", "block resamplers need all tokens")
        _require(m.grid % 2 == 0, "model.grid", "must tile into 2x2 blocks")
    if mp.kind == "r-qp":
        _require(mp.block.l_qp >= 1, "mapping.block.l_qp", "must be positive")
    if mp.kind == "r-rand":
        r = mp.rand
        _require(ext.cls_mode == "all", "extraction.cls_mode", "random subsampler needs all tokens")
        _require(0.0 < r.f_min <= r.f_mean <= r.f_max <= 1.0, "mapping.rand.f_mean", "need 0 < f_min <= f_mean <= f_max <= 1")
        _require(r.f_std > 0, "mapping.rand.f_std", "must be positive")
        _require(0.0 <= r.spike_p <= 1.0, "mapping.rand.spike_p", "must be a probability")
        _require(m.grid * m.grid >= 16, "model.grid", "random subsampler needs >= 16 patch tokens")

    inj = cfg.injection
    _require(inj.mode in INJECTION_MODES, "injection.mode", f"must be one of {INJECTION_MODES}")
    if inj.mode == "first_layer":
        _require(inj.n_llm is None and inj.n_left is None, "injection.n_llm", "unset for first-layer injection")
        _require(inj.d_embed is None, "injection.d_embed", "only used by cross-attention")
    else:
        _require(inj.n_llm is not None and inj.n_left is not None, "injection.n_llm", f'required for mode "{inj.mode}"')
        _require(inj.n_llm >= 1 and inj.n_left >= 0, "injection.n_llm", "window sizes must be non-negative")
        _require(
            inj.n_llm + inj.n_left <= m.llm_layers,
            "injection.n_llm",
            f"window n_llm+n_left must fit llm_layers={m.llm_layers}",
        )
        _require(
            ext.n_fl <= inj.n_llm,
            "extraction.n_fl",
            f"cannot exceed the injection window n_llm={inj.n_llm}",
        )
    if inj.mode == "cross_attn":
        _require(mp.kind == "none", "mapping.kind", 'must be "none" for cross-attention injection')
        _require(inj.d_embed is not None and inj.d_embed >= 1, "injection.d_embed", "required for cross-attention")
    else:
        _require(mp.kind != "none", "mapping.kind", f'"none" is only valid for cross-attention injection')
        if inj.mode == "inner":
            _require(
                mp.kind in ("linear", "qpmapper"),
                "mapping.kind",
                "inner-layer injection supports linear or qpmapper mapping",
            )

    ft = cfg.finetune
    _require(ft.n_pt >= 0, "finetune.n_pt", "must be >= 0")

    t = cfg.train
    _require(t.lr_max >= 0, "train.lr_max", "must be >= 0")
    _require(0 < t.min_lr_ratio <= 1, "train.min_lr_ratio", "must be in (0, 1]")
    _require(0 < t.warmup_frac < 1, "train.warmup_frac", "must be in (0, 1)")
    _require(t.weight_decay >= 0, "train.weight_decay", "must be >= 0")
    _require(t.grad_clip > 0, "train.grad_clip", "must be positive")
    _require(t.batch >= 1, "train.batch", "must be >= 1")
    _require(t.epochs >= 0, "train.epochs", "must be >= 0")
    _require(0 <= t.label_smoothing < 1, "train.label_smoothing", "must be in [0, 1)")


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

FULL_DIMS = ModelDims(
    d_llm=4096, llm_layers=32, llm_heads=32, vocab=32000,
    d_feats=1024, enc_layers=24, grid=16,
)
DESK_DIMS = ModelDims()

_FULL_TRAIN = TrainParams(batch=128)
_DESK_TRAIN = TrainParams(batch=32)

# canonical full-scale definitions; desk entries override what must shrink
_PRESETS: dict[str, dict] = {
    "limber-1": dict(
        summary="single projected CLS token into the first LM layer",
        extraction=Extraction(n_fl=1, cls_mode="cls"),
        mapping=Mapping(kind="linear"),
        injection=Injection(mode="first_layer"),
        finetune=Finetune(n_pt=0),
    ),
    "limber-all": dict(
        summary="all last-layer tokens linearly projected into the first LM layer",
        extraction=Extraction(n_fl=1, cls_mode="all"),
        mapping=Mapping(kind="linear"),
        injection=Injection(mode="first_layer"),
        finetune=Finetune(n_pt=0),
    ),
    "mapl": dict(
        summary="query-pooling mapper (narrow, 4 layers) into the first LM layer",
        extraction=Extraction(n_fl=1, cls_mode="all"),
        mapping=Mapping(kind="qpmapper", d_embed=256, l_qp=4, n_q=32),
        injection=Injection(mode="first_layer"),
        finetune=Finetune(n_pt=0),
        desk=dict(mapping=Mapping(kind="qpmapper", d_embed=32, l_qp=4, n_q=32)),
    ),
    "ep-alm": dict(
        summary="shared linear on 6 CLS levels injected across 12 inner layers",
        extraction=Extraction(n_fl=6, cls_mode="cls"),
        mapping=Mapping(kind="linear"),
        injection=Injection(mode="inner", n_llm=12, n_left=1),
        finetune=Finetune(n_pt=0),
        desk=dict(
            extraction=Extraction(n_fl=3, cls_mode="cls"),
            injection=Injection(mode="inner", n_llm=3, n_left=1),
        ),
    ),
    "depalm-qp-l0": dict(
        summary="query-pooling mapper (wide, 2 layers, 32 queries), first-layer injection",
        extraction=Extraction(n_fl=1, cls_mode="all"),
        mapping=Mapping(kind="qpmapper", d_embed=1024, l_qp=2, n_q=32),
        injection=Injection(mode="first_layer"),
        finetune=Finetune(n_pt=1),
        desk=dict(mapping=Mapping(kind="qpmapper", d_embed=64, l_qp=2, n_q=32)),
    ),
    "depalm-qp-inner": dict(
        summary="shared query-pooling mapper over 4 levels, 12 inner layers",
        extraction=Extraction(n_fl=4, cls_mode="all"),
        mapping=Mapping(kind="qpmapper", d_embed=1024, l_qp=2, n_q=32),
        injection=Injection(mode="inner", n_llm=12, n_left=3),
        finetune=Finetune(n_pt=16),
        desk=dict(
            extraction=Extraction(n_fl=2, cls_mode="all"),
            mapping=Mapping(kind="qpmapper", d_embed=64, l_qp=2, n_q=32),
            injection=Injection(mode="inner", n_llm=2, n_left=1),
        ),
    ),
    "depalm-r-avgpool": dict(
        summary="2x2 average-pool resampler, first-layer injection",
        extraction=Extraction(n_fl=1, cls_mode="all"),
        mapping=Mapping(kind="r-avgpool", d_embed=4096),
        injection=Injection(mode="first_layer"),
        finetune=Finetune(n_pt=1),
        desk=dict(mapping=Mapping(kind="r-avgpool", d_embed=128)),
    ),
    "depalm-r-linear": dict(
        summary="2x2 concat-projection resampler, first-layer injection",
        extraction=Extraction(n_fl=1, cls_mode="all"),
        mapping=Mapping(kind="r-linear", d_embed=4096),
        injection=Injection(mode="first_layer"),
        finetune=Finetune(n_pt=1),
        desk=dict(mapping=Mapping(kind="r-linear", d_embed=128)),
    ),
    "depalm-r-qp": dict(
        summary="per-block single-query pooling mapper, first-layer injection",
        extraction=Extraction(n_fl=1, cls_mode="all"),
        mapping=Mapping(kind="r-qp", d_embed=768, block=BlockParams(l_qp=4)),
        injection=Injection(mode="first_layer"),
        finetune=Finetune(n_pt=1),
        desk=dict(mapping=Mapping(kind="r-qp", d_embed=48, block=BlockParams(l_qp=4))),
    ),
    "depalm-r-rand": dict(
        summary="random token subsampler (keep half at eval), first-layer injection",
        extraction=Extraction(n_fl=1, cls_mode="all"),
        mapping=Mapping(kind="r-rand", rand=RandParams()),
        injection=Injection(mode="first_layer"),
        finetune=Finetune(n_pt=1),
    ),
    "depalm-c-attn": dict(
        summary="gated cross-attention reader over 4 levels, 12 inner layers",
        extraction=Extraction(n_fl=4, cls_mode="all"),
        mapping=Mapping(kind="none"),
        injection=Injection(mode="cross_attn", n_llm=12, n_left=3, d_embed=1024),
        finetune=Finetune(n_pt=1),
        desk=dict(
            extraction=Extraction(n_fl=2, cls_mode="all"),
            injection=Injection(mode="cross_attn", n_llm=2, n_left=1, d_embed=64),
        ),
    ),
}


def preset_names() -> list[str]:
    return list(PRESET_NAMES)


def preset_summary(name: str) -> str:
    return _PRESETS[name]["summary"]


def expand_preset(name: str, dims: str = "desk") -> AdapterConfig:
    """Expand a preset into a complete validated config.

    dims="full" yields the published full-scale values (analytic use);
    dims="desk" yields the trainable toy-scale instantiation.
    """
    if name not in _PRESETS:
        raise ConfigValidationError("preset", f"unknown preset {name!r}; see list-presets")
    if dims not in ("desk", "full"):
        raise ConfigValidationError("dims", 'must be "desk" or "full"')
    spec = _PRESETS[name]
    parts = {
        "extraction": spec["extraction"],
        "mapping": spec["mapping"],
        "injection": spec["injection"],
        "finetune": spec["finetune"],
    }
    if dims == "desk":
        parts.update(spec.get("desk", {}))
        model, train = DESK_DIMS, _DESK_TRAIN
    else:
        model, train = FULL_DIMS, _FULL_TRAIN
    cfg = AdapterConfig(
        model=copy.deepcopy(model),
        extraction=copy.deepcopy(parts["extraction"]),
        mapping=copy.deepcopy(parts["mapping"]),
        injection=copy.deepcopy(parts["injection"]),
        finetune=copy.deepcopy(parts["finetune"]),
        train=copy.deepcopy(train),
        name=name,
    )
    validate(cfg)
    return cfg


# ---------------------------------------------------------------------------
# dotted-path overrides
# ---------------------------------------------------------------------------

def apply_overrides(cfg: AdapterConfig, overrides: list[str]) -> AdapterConfig:
    """Apply `section.key=value` strings, coercing to the field's type."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigValidationError(item, "override must look like section.key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                node[p] = node.get(p) if isinstance(node.get(p), dict) else {}
            node = node[p]
        node[parts[-1]] = _coerce(raw)
    return from_dict(data)


def _coerce(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw
