"""Transformer encoder-decoder with timing-conditioned decoder inputs.

The decoder input at every position is the concatenation of four blocks::

    [ token embedding + position (text_dim) | duration (timing_dim)
      | remaining frames (timing_dim)       | pause flag (timing_dim) ]

Each timing block is ``relu(layer_norm(x * w + b))`` of a scalar. The
decoder output keeps the same width; the token head reads columns
``[0, text_dim)`` and the duration head reads ``[text_dim, text_dim + timing_dim)``.
The last two timing-width slices of the output feed no head.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError
from .data import SOS

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint is unreadable or does not match its configuration."""


@dataclass
class ModelConfig:
    feat_dim: int = 8
    d_model: int = 64
    text_dim: int = 64
    timing_dim: int = 16
    enc_layers: int = 2
    enc_heads: int = 4
    dec_layers: int = 2
    dec_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1
    vocab_size: int = 33
    max_positions: int = 1024
    duration_scale: float = 100.0
    frontend: str = "linear"
    conv_stride: int = 2
    ablate_timing: bool = False
    dtype: str = "float32"
    seed: int = 0

    @property
    def dec_width(self) -> int:
        return 3 * self.timing_dim + self.text_dim

    def validate(self) -> None:
        for name in ("feat_dim", "d_model", "text_dim", "timing_dim", "enc_heads", "dec_heads",
                     "ff_dim", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.d_model % self.enc_heads:
            raise ValueError(f"enc_heads={self.enc_heads} does not divide d_model={self.d_model}")
        if self.dec_width % self.dec_heads:
            raise ValueError(f"dec_heads={self.dec_heads} does not divide decoder width {self.dec_width}")
        if self.vocab_size < 6:
            raise ValueError("vocab_size must be at least 6 (5 reserved ids plus one unit)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.duration_scale <= 0:
            raise ValueError("duration_scale must be positive")
        if self.frontend not in ("linear", "conv"):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        if self.frontend == "conv" and self.conv_stride < 1:
            raise ValueError("conv_stride must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class EncoderOutput:
    h: Tensor           # [B, N', d_model]
    lengths: np.ndarray  # [B]
    key_mask: np.ndarray  # additive, [B, 1, 1, N']


class IsochronyModel:
    """Parameter container plus forward functions."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        config.validate()
        self.config = config
        self.np_dtype = np.dtype(config.dtype)
        self.params = params if params is not None else self._init_params()
        self._pe_enc = sinusoidal_positions(config.max_positions, config.d_model).astype(self.np_dtype)
        self._pe_dec = sinusoidal_positions(config.max_positions, config.text_dim).astype(self.np_dtype)

    # -- parameters -------------------------------------------------------
    def param_shapes(self) -> dict[str, tuple]:
        c = self.config
        W, D = c.dec_width, c.d_model
        in_dim = c.feat_dim * (c.conv_stride if c.frontend == "conv" else 1)
        shapes: dict[str, tuple] = {"enc.in.w": (in_dim, D), "enc.in.b": (D,)}

        def attn(prefix, q_dim, kv_dim):
            shapes.update({
                f"{prefix}.wq": (q_dim, q_dim), f"{prefix}.bq": (q_dim,),
                f"{prefix}.wk": (kv_dim, q_dim), f"{prefix}.bk": (q_dim,),
                f"{prefix}.wv": (kv_dim, q_dim), f"{prefix}.bv": (q_dim,),
                f"{prefix}.wo": (q_dim, q_dim), f"{prefix}.bo": (q_dim,),
            })

        def ln(prefix, n):
            shapes.update({f"{prefix}.g": (n,), f"{prefix}.b": (n,)})

        def ff(prefix, n):
            shapes.update({
                f"{prefix}.w1": (n, c.ff_dim), f"{prefix}.b1": (c.ff_dim,),
                f"{prefix}.w2": (c.ff_dim, n), f"{prefix}.b2": (n,),
            })

        for l in range(c.enc_layers):
            ln(f"enc.{l}.ln1", D)
            attn(f"enc.{l}.self", D, D)
            ln(f"enc.{l}.ln2", D)
            ff(f"enc.{l}.ff", D)
        if c.enc_layers:
            ln("enc.ln", D)
        shapes["dec.emb"] = (c.vocab_size, c.text_dim)
        for role in ("dur", "frames", "pause"):
            shapes[f"dec.{role}.w"] = (1, c.timing_dim)
            shapes[f"dec.{role}.b"] = (c.timing_dim,)
            ln(f"dec.{role}.ln", c.timing_dim)
        for l in range(c.dec_layers):
            ln(f"dec.{l}.ln1", W)
            attn(f"dec.{l}.self", W, W)
            ln(f"dec.{l}.ln2", W)
            attn(f"dec.{l}.cross", W, D)
            ln(f"dec.{l}.ln3", W)
            ff(f"dec.{l}.ff", W)
        if c.dec_layers:
            ln("dec.ln", W)
        shapes["head.token.w"] = (c.text_dim, c.vocab_size)
        shapes["head.token.b"] = (c.vocab_size,)
        shapes["head.dur.w"] = (c.timing_dim, 1)
        shapes["head.dur.b"] = (1,)
        return shapes

    def _init_params(self) -> dict[str, Tensor]:
        rng = np.random.default_rng([self.config.seed, 17])
        shapes = self.param_shapes()
        fan_in: dict[str, int] = {}
        for name, shape in shapes.items():
            if len(shape) == 2:
                fan_in[name] = shape[0]
        params = {}
        for name, shape in shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if name == "dec.emb":
                arr = rng.normal(0.0, 0.02, size=shape)
            elif name.endswith(".g") or name.endswith("ln.g"):
                arr = np.ones(shape)
            elif ".ln" in name and leaf == "b":
                arr = np.zeros(shape)
            elif len(shape) == 2:
                bound = 1.0 / math.sqrt(shape[0])
                arr = rng.uniform(-bound, bound, size=shape)
            else:
                wname = _weight_for_bias(name)
                bound = 1.0 / math.sqrt(fan_in.get(wname, shape[0]))
                arr = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(arr.astype(self.np_dtype), requires_grad=True, name=name)
        return params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # -- building blocks --------------------------------------------------
    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return ad.matmul(x, self.p(w)) + self.p(b)

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.p(prefix + ".g"), self.p(prefix + ".b"))

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray, heads: int) -> Tensor:
        B, Tq, W = xq.shape
        Tk = xkv.shape[1]
        dh = W // heads
        q = self._linear(xq, prefix + ".wq", prefix + ".bq").reshape(B, Tq, heads, dh).transpose(0, 2, 1, 3)
        k = self._linear(xkv, prefix + ".wk", prefix + ".bk").reshape(B, Tk, heads, dh).transpose(0, 2, 3, 1)
        v = self._linear(xkv, prefix + ".wv", prefix + ".bv").reshape(B, Tk, heads, dh).transpose(0, 2, 1, 3)
        scores = ad.matmul(q, k) * (1.0 / math.sqrt(dh)) + mask
        att = ad.softmax_last_axis(scores)
        o = ad.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, Tq, W)
        return self._linear(o, prefix + ".wo", prefix + ".bo")

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        return self._linear(ad.relu(self._linear(x, prefix + ".w1", prefix + ".b1")), prefix + ".w2", prefix + ".b2")

    def _drop(self, x: Tensor, training: bool, rng) -> Tensor:
        return ad.dropout(x, self.config.dropout, rng, training)

    # -- encoder ----------------------------------------------------------
    def encode_batch(self, feats: np.ndarray, lengths, training: bool = False, rng=None) -> EncoderOutput:
        """Encode zero-padded features ``[B, N, feat_dim]`` with valid ``lengths``."""
        c = self.config
        feats = np.asarray(feats, dtype=self.np_dtype)
        lengths = np.asarray(lengths, dtype=np.int64)
        if feats.ndim != 3 or feats.shape[-1] != c.feat_dim:
            raise ShapeError(f"encoder expects [B, N, {c.feat_dim}] features, got {feats.shape}")
        if feats.shape[1] == 0 or (lengths < 1).any():
            raise ValueError("encoder input must contain at least one frame")
        B, N, _ = feats.shape
        if c.frontend == "conv":
            k = c.conv_stride
            Np = -(-N // k)
            padded = np.zeros((B, Np * k, c.feat_dim), dtype=self.np_dtype)
            padded[:, :N] = feats
            feats = padded.reshape(B, Np, k * c.feat_dim)
            lengths = -(-lengths // k)
            N = Np
        if N > c.max_positions:
            raise ValueError(f"{N} encoder positions exceed max_positions={c.max_positions}")
        x = self._linear(Tensor(feats), "enc.in.w", "enc.in.b") + self._pe_enc[:N]
        x = self._drop(x, training, rng)
        valid = np.arange(N)[None, :] < lengths[:, None]
        key_mask = np.where(valid, 0.0, -1e9).astype(self.np_dtype)[:, None, None, :]
        for l in range(c.enc_layers):
            h1 = self._ln(x, f"enc.{l}.ln1")
            x = x + self._drop(self._attention(f"enc.{l}.self", h1, h1, key_mask, c.enc_heads), training, rng)
            x = x + self._drop(self._ff(self._ln(x, f"enc.{l}.ln2"), f"enc.{l}.ff"), training, rng)
        if c.enc_layers:
            x = self._ln(x, "enc.ln")
        return EncoderOutput(x, lengths, key_mask)

    def encode(self, features: np.ndarray) -> Tensor:
        """Eval-mode encoding of one utterance ``[N, feat_dim]`` -> ``[N', d_model]``."""
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError(f"expected a non-empty [N, feat_dim] matrix, got shape {features.shape}")
        out = self.encode_batch(features[None], [features.shape[0]])
        return Tensor._make(out.h.data[0], (out.h,), lambda g: (g[None],))

    # -- decoder ----------------------------------------------------------
    def _timing(self, role: str, x: np.ndarray) -> Tensor:
        pre = Tensor(np.asarray(x, dtype=self.np_dtype)[..., None]) * self.p(f"dec.{role}.w") + self.p(f"dec.{role}.b")
        return ad.relu(self._ln(pre, f"dec.{role}.ln"))

    def build_decoder_input(self, prev_z, prev_d, f, s) -> Tensor:
        """Decoder input ``E`` for ``[B, T]`` (or ``[T]``) sequences; durations in frames."""
        c = self.config
        prev_z = np.asarray(prev_z, dtype=np.int64)
        squeeze = prev_z.ndim == 1
        arrays = [np.atleast_2d(np.asarray(a)) for a in (prev_z, prev_d, f, s)]
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ShapeError(f"decoder input sequences differ in shape: {[a.shape for a in arrays]}")
        prev_z, prev_d, f, s = arrays
        T = prev_z.shape[1]
        if T > c.max_positions:
            raise ValueError(f"{T} decoder positions exceed max_positions={c.max_positions}")
        Z = ad.embedding_lookup(self.p("dec.emb"), prev_z) + self._pe_dec[:T]
        if c.ablate_timing:
            zero = Tensor(np.zeros(prev_z.shape + (c.timing_dim,), dtype=self.np_dtype))
            D = F = S = zero
        else:
            D = self._timing("dur", prev_d / c.duration_scale)
            F = self._timing("frames", f / c.duration_scale)
            S = self._timing("pause", s)
        E = ad.concat_last_axis([Z, D, F, S])
        if E.shape[-1] != c.dec_width:
            raise ShapeError(f"decoder input width {E.shape[-1]} != 3*I + I_z = {c.dec_width}")
        if squeeze:
            return Tensor._make(E.data[0], (E,), lambda g: (g[None],))
        return E

    def decode(self, E: Tensor, enc: EncoderOutput, training: bool = False, rng=None) -> Tensor:
        c = self.config
        if E.shape[-1] != c.dec_width:
            raise ShapeError(f"decoder input width {E.shape[-1]} != 3*I + I_z = {c.dec_width}")
        B, T, _ = E.shape
        causal = np.triu(np.full((T, T), -1e9, dtype=self.np_dtype), k=1)
        x = self._drop(E, training, rng)
        for l in range(c.dec_layers):
            h1 = self._ln(x, f"dec.{l}.ln1")
            x = x + self._drop(self._attention(f"dec.{l}.self", h1, h1, causal, c.dec_heads), training, rng)
            h2 = self._ln(x, f"dec.{l}.ln2")
            x = x + self._drop(self._attention(f"dec.{l}.cross", h2, enc.h, enc.key_mask, c.dec_heads),
                               training, rng)
            x = x + self._drop(self._ff(self._ln(x, f"dec.{l}.ln3"), f"dec.{l}.ff"), training, rng)
        if c.dec_layers:
            x = self._ln(x, "dec.ln")
        if x.shape[-1] != c.dec_width:
            raise ShapeError(f"decoder output width {x.shape[-1]} != {c.dec_width}")
        return x

    def project_heads(self, O: Tensor) -> tuple[Tensor, Tensor]:
        """Token logits from ``O[..., :I_z]``; durations (units of duration_scale) from ``O[..., I_z:I_z+I]``."""
        c = self.config
        if O.shape[-1] != c.dec_width:
            raise ShapeError(f"head input width {O.shape[-1]} != 3*I + I_z = {c.dec_width}")
        O1 = ad.slice_last_axis(O, 0, c.text_dim)
        O2 = ad.slice_last_axis(O, c.text_dim, c.text_dim + c.timing_dim)
        logits = self._linear(O1, "head.token.w", "head.token.b")
        dur = self._linear(O2, "head.dur.w", "head.dur.b")
        return logits, dur.reshape(dur.shape[:-1])

    def forward(self, batch, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        """Teacher-forced forward over a collated :class:`Batch`."""
        enc = self.encode_batch(batch.features, batch.src_lengths, training, rng)
        E = self.build_decoder_input(batch.prev_z, batch.prev_d, batch.f, batch.s)
        O = self.decode(E, enc, training, rng)
        return self.project_heads(O)

    # -- checkpoints ------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}


def _weight_for_bias(name: str) -> str:
    prefix, leaf = name.rsplit(".", 1)
    if leaf.startswith("b") and len(leaf) <= 2:
        return f"{prefix}.w{leaf[1:]}"
    return name


# --------------------------------------------------------------------------
# Teacher-forced batches
# --------------------------------------------------------------------------


@dataclass
class Batch:
    features: np.ndarray     # [B, N, feat_dim]
    src_lengths: np.ndarray  # [B]
    prev_z: np.ndarray       # [B, T]
    prev_d: np.ndarray       # [B, T] frames, possibly noisy
    f: np.ndarray            # [B, T]
    s: np.ndarray            # [B, T]
    z: np.ndarray            # [B, T] targets
    d: np.ndarray            # [B, T] clean duration targets
    mask: np.ndarray         # [B, T] 1 on real positions
    uids: list


def teacher_inputs(pt, d_input=None) -> tuple[np.ndarray, np.ndarray]:
    """Shift targets right: the decoder sees (z[t-1], d[t-1]) with <sos>, 0 at t=0."""
    d_src = pt.d if d_input is None else d_input
    prev_z = np.concatenate([[SOS], pt.z[:-1]]).astype(np.int64)
    prev_d = np.concatenate([[0.0], np.asarray(d_src, dtype=np.float64)[:-1]])
    return prev_z, prev_d


def collate(utterances, targets, noise_sigma: float = 0.0, rng=None) -> Batch:
    from .data import add_duration_noise

    B = len(utterances)
    N = max(u.features.shape[0] for u in utterances)
    T = max(len(t) for t in targets)
    feat_dim = utterances[0].features.shape[1]
    feats = np.zeros((B, N, feat_dim))
    lengths = np.zeros(B, dtype=np.int64)
    out = {k: np.zeros((B, T), dtype=np.float64) for k in ("prev_d", "f", "s", "d", "mask")}
    prev_z = np.zeros((B, T), dtype=np.int64)
    z = np.zeros((B, T), dtype=np.int64)
    for i, (u, pt) in enumerate(zip(utterances, targets)):
        n, t = u.features.shape[0], len(pt)
        feats[i, :n] = u.features
        lengths[i] = n
        d_in = add_duration_noise(pt.d, noise_sigma, rng) if noise_sigma > 0 else None
        pz, pd = teacher_inputs(pt, d_in)
        prev_z[i, :t] = pz
        out["prev_d"][i, :t] = pd
        out["f"][i, :t] = pt.f
        out["s"][i, :t] = pt.s
        out["d"][i, :t] = pt.d
        out["mask"][i, :t] = 1.0
        z[i, :t] = pt.z
    return Batch(feats, lengths, prev_z, out["prev_d"], out["f"], out["s"], z, out["d"], out["mask"],
                 [u.uid for u in utterances])


# --------------------------------------------------------------------------
# Checkpoint container: numpy .npz with a JSON header
# --------------------------------------------------------------------------


def save_checkpoint(path, model: IsochronyModel, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    header = {"version": CHECKPOINT_VERSION, "config": json.loads(model.config.to_json()), "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[IsochronyModel, dict[str, np.ndarray], dict]:
    """Load and validate; any shape disagreement names the first offending parameter."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if "__header__" not in arrays:
        raise CheckpointError(f"{path}: missing header")
    header = json.loads(arrays.pop("__header__").tobytes().decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = ModelConfig.from_dict(header["config"])
    shell = IsochronyModel.__new__(IsochronyModel)
    shell.config = config
    expected = shell.param_shapes()
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in expected.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"parameter {name}: missing from checkpoint")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(shape):
            raise CheckpointError(f"parameter {name}: checkpoint shape {tuple(arr.shape)} != expected {tuple(shape)}")
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    stray = [k for k in arrays if k.startswith("param/") and k[6:] not in expected]
    if stray:
        raise CheckpointError(f"parameter {stray[0][6:]}: not part of the configured model")
    extra = {k[6:]: v for k, v in arrays.items() if k.startswith("extra/")}
    return IsochronyModel(config, params), extra, header.get("meta", {})
