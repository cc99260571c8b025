"""Seeded miniature transformer stack.

A pre-norm decoder block repeated ``layers`` times: RMSNorm, causal
multi-head attention with rotary position embeddings, residual add,
RMSNorm, SiLU-gated MLP, residual add.  Every linear projection is a
named site (q/k/v/o in attention, gate/up/down in the MLP) whose input
activation can be sparsified and/or quantized right before the matmul,
which is what the sensitivity probes and pipelines exercise.

Weights are drawn from a seeded uniform generator, so equal seeds give
byte-identical models on every platform.  No tokenizer: callers supply
the embedded input directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .masking import NMPattern, ScoreStrategy, sparsify
from .quantization import SmoothScales, apply_smoothing, w8a8_linear
from .tensor_core import as_f32_2d, fnv1a64, matmul, seeded_uniform

__all__ = [
    "PROJECTION_KINDS",
    "ATTENTION_KINDS",
    "MLP_KINDS",
    "ProjectionSite",
    "ToyConfig",
    "SparsifySpec",
    "QuantizeSpec",
    "SiteConfig",
    "ModelWeights",
    "init_model",
    "rope",
    "forward",
    "forward_and_capture",
    "capture_activations",
    "mac_costs",
    "export_model",
    "import_model",
]

ATTENTION_KINDS = ("q_proj", "k_proj", "v_proj", "o_proj")
MLP_KINDS = ("gate_proj", "up_proj", "down_proj")
PROJECTION_KINDS = ATTENTION_KINDS + MLP_KINDS

RMS_EPS = 1e-6

ORDER_SMOOTH_FIRST = "smooth_then_sparsify"
ORDER_SPARSIFY_FIRST = "sparsify_then_smooth"


@dataclass(frozen=True, order=True)
class ProjectionSite:
    layer: int
    kind: str

    def __post_init__(self):
        if self.kind not in PROJECTION_KINDS:
            raise ConfigError(f"unknown projection kind {self.kind!r}")
        if self.layer < 0:
            raise ConfigError(f"negative layer index {self.layer}")

    def __str__(self) -> str:
        return f"{self.kind}@{self.layer}"


@dataclass(frozen=True)
class ToyConfig:
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    seq_len: int = 32
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.seq_len < 1 or self.heads < 1:
            raise ConfigError("layers, seq_len, and heads must be positive")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.d_head % 2 != 0:
            raise ConfigError(f"head dim {self.d_head} must be even for rotation")
        # Both projection input widths must host every preset group size.
        if self.d_model % 16 != 0 or self.d_ff % 16 != 0:
            raise ConfigError("d_model and d_ff must be divisible by 16")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass(frozen=True)
class SparsifySpec:
    pattern: NMPattern
    strategy: ScoreStrategy


@dataclass(frozen=True)
class QuantizeSpec:
    smooth: SmoothScales | None = None
    order: str = ORDER_SMOOTH_FIRST

    def __post_init__(self):
        if self.order not in (ORDER_SMOOTH_FIRST, ORDER_SPARSIFY_FIRST):
            raise ConfigError(f"unknown transform order {self.order!r}")


@dataclass(frozen=True)
class SiteConfig:
    sparsify: SparsifySpec | None = None
    quantize: QuantizeSpec | None = None


@dataclass(frozen=True)
class ModelWeights:
    config: ToyConfig
    weights: dict[ProjectionSite, np.ndarray] = field(repr=False)

    def sites(self) -> list[ProjectionSite]:
        return [
            ProjectionSite(layer, kind)
            for layer in range(self.config.layers)
            for kind in PROJECTION_KINDS
        ]

    def weight(self, site: ProjectionSite) -> np.ndarray:
        try:
            return self.weights[site]
        except KeyError:
            raise ConfigError(f"model has no site {site}") from None


def _site_shape(cfg: ToyConfig, kind: str) -> tuple[int, int]:
    if kind in ("q_proj", "k_proj", "v_proj", "o_proj"):
        return cfg.d_model, cfg.d_model
    if kind in ("gate_proj", "up_proj"):
        return cfg.d_model, cfg.d_ff
    return cfg.d_ff, cfg.d_model


def init_model(cfg: ToyConfig) -> ModelWeights:
    """Deterministic weights, uniform in (-1/sqrt(d_in), 1/sqrt(d_in)).

    Each site draws from its own stream, seeded by the model seed XOR an
    FNV-1a hash of the site label, so site tensors are independent and
    reproducible regardless of initialization order.
    """
    weights = {}
    for layer in range(cfg.layers):
        for kind in PROJECTION_KINDS:
            site = ProjectionSite(layer, kind)
            d_in, d_out = _site_shape(cfg, kind)
            bound = 1.0 / np.sqrt(d_in)
            site_seed = (cfg.seed ^ fnv1a64(f"{kind}.layer{layer}")) % 2**64
            weights[site] = seeded_uniform(d_in, d_out, -bound, bound, site_seed)
    return ModelWeights(cfg, weights)


def mac_costs(cfg: ToyConfig) -> dict[ProjectionSite, int]:
    """Dense multiply-accumulate count per site for one forward pass."""
    costs = {}
    for layer in range(cfg.layers):
        for kind in PROJECTION_KINDS:
            d_in, d_out = _site_shape(cfg, kind)
            costs[ProjectionSite(layer, kind)] = cfg.seq_len * d_in * d_out
    return costs


def rope(block, positions, base: float) -> np.ndarray:
    """Rotate adjacent pairs (x[2i], x[2i+1]) by pos * base^(-2i / d_head)."""
    block = as_f32_2d(block, "block")
    if block.shape[1] % 2 != 0:
        raise ConfigError(f"head dim {block.shape[1]} must be even")
    pos = np.asarray(positions, dtype=np.float64).ravel()
    if pos.size != block.shape[0]:
        raise ShapeError(f"{pos.size} positions for {block.shape[0]} rows")
    half = block.shape[1] // 2
    inv_freq = np.power(float(base), -2.0 * np.arange(half) / block.shape[1])
    angles = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    b64 = block.astype(np.float64)
    even, odd = b64[:, 0::2], b64[:, 1::2]
    out = np.empty_like(b64)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out.astype(np.float32)


def _rms_norm(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    ms = np.mean(x64 * x64, axis=1, keepdims=True)
    return (x64 / np.sqrt(ms + RMS_EPS)).astype(np.float32)


def _causal_softmax(scores: np.ndarray, scale: float) -> np.ndarray:
    s = scores.astype(np.float64) * scale
    n = s.shape[0]
    s[np.triu_indices(n, k=1)] = -np.inf
    s -= s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def _silu_gate(gate: np.ndarray, up: np.ndarray) -> np.ndarray:
    g = gate.astype(np.float64)
    return (g / (1.0 + np.exp(-g)) * up.astype(np.float64)).astype(np.float32)


def _project(model: ModelWeights, site: ProjectionSite, x: np.ndarray,
             site_cfg: dict) -> np.ndarray:
    cfg = site_cfg.get(site)
    w = model.weight(site)
    if cfg is None or (cfg.sparsify is None and cfg.quantize is None):
        return matmul(x, w)
    quant = cfg.quantize
    smooth = quant.smooth if quant is not None else None
    if smooth is not None and quant.order == ORDER_SMOOTH_FIRST:
        x, w = apply_smoothing(x, w, smooth)
        smooth = None
    if cfg.sparsify is not None:
        x = sparsify(x, cfg.sparsify.strategy, cfg.sparsify.pattern)
    if smooth is not None:
        x, w = apply_smoothing(x, w, smooth)
    if quant is not None:
        return w8a8_linear(x, w)
    return matmul(x, w)


def _run(model: ModelWeights, x_embed, site_cfg: dict | None,
         capture: dict | None = None, capture_sites=None) -> np.ndarray:
    cfg = model.config
    x = as_f32_2d(x_embed, "x_embed")
    if x.shape != (cfg.seq_len, cfg.d_model):
        raise ShapeError(
            f"embedding shape {x.shape} != ({cfg.seq_len}, {cfg.d_model})"
        )
    site_cfg = dict(site_cfg or {})
    known = set(model.sites())
    for site in site_cfg:
        if site not in known:
            raise ConfigError(f"site {site} not in this model")

    def grab(site, tensor):
        if capture is not None and (capture_sites is None or site in capture_sites):
            capture[site] = tensor.copy()

    positions = np.arange(cfg.seq_len)
    scale = 1.0 / np.sqrt(cfg.d_head)
    for layer in range(cfg.layers):
        q_site = ProjectionSite(layer, "q_proj")
        k_site = ProjectionSite(layer, "k_proj")
        v_site = ProjectionSite(layer, "v_proj")
        o_site = ProjectionSite(layer, "o_proj")

        xn = _rms_norm(x)
        grab(q_site, xn)
        grab(k_site, xn)
        grab(v_site, xn)
        q = _project(model, q_site, xn, site_cfg)
        k = _project(model, k_site, xn, site_cfg)
        v = _project(model, v_site, xn, site_cfg)

        ctx = np.empty((cfg.seq_len, cfg.d_model), dtype=np.float32)
        for h in range(cfg.heads):
            span = slice(h * cfg.d_head, (h + 1) * cfg.d_head)
            qh = rope(np.ascontiguousarray(q[:, span]), positions, cfg.rope_base)
            kh = rope(np.ascontiguousarray(k[:, span]), positions, cfg.rope_base)
            scores = matmul(qh, np.ascontiguousarray(kh.T))
            probs = _causal_softmax(scores, scale)
            ctx[:, span] = matmul(probs, np.ascontiguousarray(v[:, span]))

        grab(o_site, ctx)
        x = x + _project(model, o_site, ctx, site_cfg)

        gate_site = ProjectionSite(layer, "gate_proj")
        up_site = ProjectionSite(layer, "up_proj")
        down_site = ProjectionSite(layer, "down_proj")

        xn2 = _rms_norm(x)
        grab(gate_site, xn2)
        grab(up_site, xn2)
        gate = _project(model, gate_site, xn2, site_cfg)
        up = _project(model, up_site, xn2, site_cfg)
        hidden = _silu_gate(gate, up)
        grab(down_site, hidden)
        x = x + _project(model, down_site, hidden, site_cfg)
    return x


def forward(model: ModelWeights, x_embed, site_cfg: dict | None = None) -> np.ndarray:
    """Full forward pass with optional per-site input transforms."""
    return _run(model, x_embed, site_cfg)


def forward_and_capture(
    model: ModelWeights, x_embed, sites=None
) -> tuple[np.ndarray, dict]:
    """Dense forward pass returning (output, per-site projection inputs)."""
    wanted = set(sites) if sites is not None else None
    if wanted is not None:
        known = set(model.sites())
        for site in wanted:
            if site not in known:
                raise ConfigError(f"site {site} not in this model")
    capture: dict = {}
    out = _run(model, x_embed, None, capture=capture, capture_sites=wanted)
    return out, capture


def capture_activations(model: ModelWeights, x_embed, sites) -> dict:
    """Projection-input activations of a dense forward pass, per site."""
    _, capture = forward_and_capture(model, x_embed, list(sites))
    return capture


def export_model(model: ModelWeights, directory) -> None:
    """One container file per site plus a plain-text manifest."""
    from .tensor_io import write_tensor

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    lines = [
        f"layers={cfg.layers}",
        f"d_model={cfg.d_model}",
        f"heads={cfg.heads}",
        f"d_ff={cfg.d_ff}",
        f"seq_len={cfg.seq_len}",
        f"rope_base={cfg.rope_base!r}",
        f"seed={cfg.seed}",
    ]
    for site in model.sites():
        name = f"w_l{site.layer}_{site.kind}.nmt"
        write_tensor(directory / name, model.weight(site))
        lines.append(f"site={site.layer}:{site.kind}:{name}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_model(directory) -> ModelWeights:
    """Load a model directory written by ``export_model``."""
    from .tensor_io import read_tensor

    directory = Path(directory)
    fields: dict[str, str] = {}
    site_lines = []
    for raw in (directory / "manifest.txt").read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "site":
            site_lines.append(value)
        else:
            fields[key] = value
    try:
        cfg = ToyConfig(
            layers=int(fields["layers"]),
            d_model=int(fields["d_model"]),
            heads=int(fields["heads"]),
            d_ff=int(fields["d_ff"]),
            seq_len=int(fields["seq_len"]),
            rope_base=float(fields["rope_base"]),
            seed=int(fields["seed"]),
        )
    except KeyError as exc:
        raise ValidationError(f"manifest is missing field {exc}") from None
    except ValueError as exc:
        raise ValidationError(f"manifest field unparseable: {exc}") from None
    weights = {}
    for entry in site_lines:
        try:
            layer_s, kind, name = entry.split(":", 2)
            site = ProjectionSite(int(layer_s), kind)
        except ValueError:
            raise ValidationError(f"malformed manifest site line: {entry!r}") from None
        tensor = read_tensor(directory / name)
        if not isinstance(tensor, np.ndarray) or tensor.dtype != np.float32:
            raise ValidationError(f"{name}: site weights must be dense float32")
        if tensor.shape != _site_shape(cfg, kind):
            raise ValidationError(
                f"{name}: shape {tensor.shape} != {_site_shape(cfg, kind)}"
            )
        weights[site] = tensor
    model = ModelWeights(cfg, weights)
    missing = [s for s in model.sites() if s not in weights]
    if missing:
        raise ValidationError(f"manifest is missing sites: {missing[:3]}")
    return model
