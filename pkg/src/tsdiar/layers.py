"""Neural layers used by the diarization models, built on the autodiff Tensor.

Parameter-owning classes expose ``parameters(prefix)`` returning a flat
name -> Tensor dict so checkpoints and optimizers can address everything
uniformly. Initialization is uniform Kaiming-style fan-in scaling, seeded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, softmax


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(1.0 / max(1, fan_in)))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {w.shape}")
    y = x @ w
    return y + b if b is not None else y


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.w = Tensor(kaiming_uniform(rng, (in_dim, out_dim), in_dim, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


class LayerNorm:
    def __init__(self, width: int, dtype=np.float32, eps: float = 1e-6):
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


# -- multi-head attention ------------------------------------------------------------


@dataclass
class AttentionParams:
    """Per-head projections; ``w_q[i]`` etc. are (input_width, head_dim)."""

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    b_q: list[Tensor]
    b_k: list[Tensor]
    b_v: list[Tensor]
    w_out: Tensor
    b_out: Tensor
    n_heads: int
    head_dim: int

    @staticmethod
    def create(width: int, n_heads: int, head_dim: int, rng, dtype=np.float32) -> "AttentionParams":
        def mk_w():
            return Tensor(kaiming_uniform(rng, (width, head_dim), width, dtype), requires_grad=True)

        def mk_b():
            return Tensor(np.zeros(head_dim, dtype=dtype), requires_grad=True)

        return AttentionParams(
            w_q=[mk_w() for _ in range(n_heads)],
            w_k=[mk_w() for _ in range(n_heads)],
            w_v=[mk_w() for _ in range(n_heads)],
            b_q=[mk_b() for _ in range(n_heads)],
            b_k=[mk_b() for _ in range(n_heads)],
            b_v=[mk_b() for _ in range(n_heads)],
            w_out=Tensor(
                kaiming_uniform(rng, (n_heads * head_dim, width), n_heads * head_dim, dtype),
                requires_grad=True,
            ),
            b_out=Tensor(np.zeros(width, dtype=dtype), requires_grad=True),
            n_heads=n_heads,
            head_dim=head_dim,
        )

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i in range(self.n_heads):
            out[f"{prefix}.wq{i}"] = self.w_q[i]
            out[f"{prefix}.wk{i}"] = self.w_k[i]
            out[f"{prefix}.wv{i}"] = self.w_v[i]
            out[f"{prefix}.bq{i}"] = self.b_q[i]
            out[f"{prefix}.bk{i}"] = self.b_k[i]
            out[f"{prefix}.bv{i}"] = self.b_v[i]
        out[f"{prefix}.wo"] = self.w_out
        out[f"{prefix}.bo"] = self.b_out
        return out


def multihead_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    params: AttentionParams,
    axis: int = -2,
) -> Tensor:
    """Scaled dot-product attention along ``axis``, heads concatenated then projected.

    Inputs are (..., L, width) after moving ``axis`` to -2; scores use the
    1/sqrt(head_dim) scale.
    """
    nd = q_in.ndim
    ax = axis if axis >= 0 else axis + nd
    if not 0 <= ax < nd - 1:
        raise ValueError(f"attention axis {axis} out of range for rank {nd} input (last axis is width)")
    q_in = q_in.moveaxis(ax, -2)
    k_in = k_in.moveaxis(ax, -2)
    v_in = v_in.moveaxis(ax, -2)

    scale = 1.0 / float(np.sqrt(params.head_dim))
    heads = []
    for i in range(params.n_heads):
        q = linear(q_in, params.w_q[i], params.b_q[i])
        k = linear(k_in, params.w_k[i], params.b_k[i])
        v = linear(v_in, params.w_v[i], params.b_v[i])
        scores = (q @ k.swapaxes(-1, -2)) * scale
        heads.append(softmax(scores, axis=-1) @ v)
    out = linear(concat(heads, axis=-1), params.w_out, params.b_out)
    return out.moveaxis(-2, ax)


def sinusoidal_positions(length: int, width: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / width)
    pe = np.zeros((length, width))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe.astype(dtype)


class TransformerEncoderLayer:
    """Pre-LN encoder layer: self-attention and a ReLU feed-forward sublayer.

    Layer norm and residual connections wrap each sublayer; normalizing the
    input of each sublayer (rather than its output) keeps small-width stacks
    trainable from random init.
    """

    def __init__(self, width: int, n_heads: int, ff_width: int, rng, dtype=np.float32):
        if width % n_heads != 0:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.attn = AttentionParams.create(width, n_heads, width // n_heads, rng, dtype)
        self.ff1 = Linear(width, ff_width, rng, dtype)
        self.ff2 = Linear(ff_width, width, rng, dtype)
        self.ln1 = LayerNorm(width, dtype)
        self.ln2 = LayerNorm(width, dtype)

    def __call__(self, x: Tensor, axis: int = -2) -> Tensor:
        normed = self.ln1(x)
        h = x + multihead_attention(normed, normed, normed, self.attn, axis=axis)
        return h + self.ff2(self.ff1(self.ln2(h)).relu())

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.parameters(f"{prefix}.attn")
        out.update(self.ff1.parameters(f"{prefix}.ff1"))
        out.update(self.ff2.parameters(f"{prefix}.ff2"))
        out.update(self.ln1.parameters(f"{prefix}.ln1"))
        out.update(self.ln2.parameters(f"{prefix}.ln2"))
        return out


class TransformerEncoder:
    """Encoder stack; optional sinusoidal positions over the attention axis.

    ``pe_scale`` matches the positional amplitude to the embedding scale so
    narrow embeddings are not swamped by the unit-amplitude sinusoids.
    """

    def __init__(
        self,
        width: int,
        n_layers: int,
        n_heads: int,
        ff_width: int,
        rng,
        dtype=np.float32,
        positional: bool = False,
        pe_scale: float = 1.0,
    ):
        self.layers = [
            TransformerEncoderLayer(width, n_heads, ff_width, rng, dtype) for _ in range(n_layers)
        ]
        self.positional = positional
        self.pe_scale = pe_scale
        self.width = width
        self.dtype = dtype

    def __call__(self, x: Tensor, axis: int = -2) -> Tensor:
        if self.positional:
            ax = axis if axis >= 0 else axis + x.ndim
            length = x.shape[ax]
            pe = sinusoidal_positions(length, self.width, self.dtype) * self.dtype(self.pe_scale)
            shape = [1] * x.ndim
            shape[ax] = length
            shape[-1] = self.width
            x = x + pe.reshape(shape)
        for layer in self.layers:
            x = layer(x, axis=axis)
        return x

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.l{i}"))
        return out


# -- BiLSTM -----------------------------------------------------------------------


class LstmDirection:
    def __init__(self, in_dim: int, hidden: int, rng, dtype=np.float32):
        self.w_ih = Tensor(kaiming_uniform(rng, (in_dim, 4 * hidden), in_dim, dtype), requires_grad=True)
        self.w_hh = Tensor(kaiming_uniform(rng, (hidden, 4 * hidden), hidden, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(4 * hidden, dtype=dtype), requires_grad=True)
        self.hidden = hidden

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_ih": self.w_ih, f"{prefix}.w_hh": self.w_hh, f"{prefix}.b": self.b}


class BiLstm:
    """Bidirectional LSTM over (T, B, I) producing (T, B, 2H)."""

    def __init__(self, in_dim: int, hidden: int, rng, dtype=np.float32):
        self.fwd = LstmDirection(in_dim, hidden, rng, dtype)
        self.bwd = LstmDirection(in_dim, hidden, rng, dtype)
        self.hidden = hidden
        self.dtype = dtype

    def _run(self, x: Tensor, direction: LstmDirection, reverse: bool) -> list[Tensor]:
        t_len, batch, _ = x.shape
        h_dim = direction.hidden
        h = Tensor(np.zeros((batch, h_dim), dtype=x.dtype))
        c = Tensor(np.zeros((batch, h_dim), dtype=x.dtype))
        order = range(t_len - 1, -1, -1) if reverse else range(t_len)
        outputs: list[Tensor | None] = [None] * t_len
        for t in order:
            z = x[t] @ direction.w_ih + h @ direction.w_hh + direction.b
            i_g = z[:, 0 * h_dim : 1 * h_dim].sigmoid()
            f_g = z[:, 1 * h_dim : 2 * h_dim].sigmoid()
            g_g = z[:, 2 * h_dim : 3 * h_dim].tanh()
            o_g = z[:, 3 * h_dim : 4 * h_dim].sigmoid()
            c = f_g * c + i_g * g_g
            h = o_g * c.tanh()
            outputs[t] = h
        return outputs  # type: ignore[return-value]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ValueError(f"bilstm expects (T, B, I), got {x.shape}")
        fwd = self._run(x, self.fwd, reverse=False)
        bwd = self._run(x, self.bwd, reverse=True)
        steps = [concat([f.reshape(1, *f.shape), b.reshape(1, *b.shape)], axis=-1) for f, b in zip(fwd, bwd)]
        return concat(steps, axis=0)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.fwd.parameters(f"{prefix}.fwd")
        out.update(self.bwd.parameters(f"{prefix}.bwd"))
        return out


# -- 2-D convolution and the scaled-down ResNet front end -----------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: tuple[int, int] = (1, 1)) -> Tensor:
    """'Same'-padded 2-D convolution: (B, Cin, H, W) -> (B, Cout, ceil(H/sh), ceil(W/sw))."""
    bsz, cin, h_in, w_in = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    sh, sw = stride
    h_out = -(-h_in // sh)
    w_out = -(-w_in // sw)
    pad_h = max((h_out - 1) * sh + kh - h_in, 0)
    pad_w = max((w_out - 1) * sw + kw - w_in, 0)
    pads = ((0, 0), (0, 0), (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2))

    xp = np.pad(x.data, pads)
    w_np = w.data
    y = np.zeros((bsz, cout, h_out, w_out), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + sh * h_out : sh, v : v + sw * w_out : sw]
            y += np.einsum("bchw,oc->bohw", patch, w_np[:, :, u, v], optimize=True)
    if b is not None:
        y += b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u : u + sh * h_out : sh, v : v + sw * w_out : sw] += np.einsum(
                        "bohw,oc->bchw", g, w_np[:, :, u, v], optimize=True
                    )
            x._accumulate(
                dxp[
                    :,
                    :,
                    pads[2][0] : pads[2][0] + h_in,
                    pads[3][0] : pads[3][0] + w_in,
                ]
            )
        if w.requires_grad:
            dw = np.zeros_like(w_np)
            for u in range(kh):
                for v in range(kw):
                    patch = xp[:, :, u : u + sh * h_out : sh, v : v + sw * w_out : sw]
                    dw[:, :, u, v] = np.einsum("bchw,bohw->oc", patch, g, optimize=True)
            w._accumulate(dw)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    out = Tensor._op(y, parents, None)
    out._backward = backward if out.requires_grad else None
    return out


class Conv2d:
    def __init__(self, cin: int, cout: int, kernel: int, stride: tuple[int, int], rng, dtype=np.float32):
        fan_in = cin * kernel * kernel
        self.w = Tensor(
            kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in, dtype), requires_grad=True
        )
        # Uniform (not zero) bias init keeps ReLU pre-activations off the exact
        # kink even where an upstream ReLU zeroed a whole receptive field.
        self.b = Tensor(kaiming_uniform(rng, (cout,), fan_in, dtype), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class ResidualBlock:
    """Two 3x3 convs with a (possibly projected) skip; ReLU after the sum."""

    def __init__(self, cin: int, cout: int, stride: int, rng, dtype=np.float32, use_residual=True):
        self.conv1 = Conv2d(cin, cout, 3, (stride, stride), rng, dtype)
        self.conv2 = Conv2d(cout, cout, 3, (1, 1), rng, dtype)
        self.use_residual = use_residual
        self.proj: Conv2d | None = None
        if use_residual and (cin != cout or stride != 1):
            self.proj = Conv2d(cin, cout, 1, (stride, stride), rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(self.conv1(x).relu())
        if self.use_residual:
            skip = self.proj(x) if self.proj is not None else x
            h = h + skip
        return h.relu()

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.conv1.parameters(f"{prefix}.c1")
        out.update(self.conv2.parameters(f"{prefix}.c2"))
        if self.proj is not None:
            out.update(self.proj.parameters(f"{prefix}.proj"))
        return out


class ResNetLite:
    """Scaled-down residual conv front end: (B, 1, T, F) -> frame embeddings (B, T', D).

    The stride schedule downsamples time (and frequency) by its product;
    frequencies are mean-pooled and frames projected to the embedding width.
    """

    def __init__(
        self,
        n_mels: int,
        widths: tuple[int, ...],
        strides: tuple[int, ...],
        embed_dim: int,
        rng,
        dtype=np.float32,
        use_residual: bool = True,
    ):
        if len(widths) != len(strides):
            raise ValueError("widths and strides must align")
        self.stem = Conv2d(1, widths[0], 3, (1, 1), rng, dtype)
        self.blocks = []
        cin = widths[0]
        for width, stride in zip(widths, strides):
            self.blocks.append(ResidualBlock(cin, width, stride, rng, dtype, use_residual))
            cin = width
        self.proj = Linear(cin, embed_dim, rng, dtype)
        self.time_stride = int(np.prod(strides))
        self.embed_dim = embed_dim
        self.n_mels = n_mels

    def __call__(self, x: Tensor) -> Tensor:
        h = self.stem(x).relu()
        for block in self.blocks:
            h = block(h)
        frames = h.mean(axis=3)  # (B, C, T')
        return self.proj(frames.swapaxes(1, 2))

    def output_frames(self, n_input_frames: int) -> int:
        return -(-n_input_frames // self.time_stride)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.stem.parameters(f"{prefix}.stem")
        for i, block in enumerate(self.blocks):
            out.update(block.parameters(f"{prefix}.b{i}"))
        out.update(self.proj.parameters(f"{prefix}.proj"))
        return out


# -- pooling and losses -----------------------------------------------------------------


def gsp(x: Tensor) -> Tensor:
    """Global statistics pooling over time: concat(mean, population std), (B, T, D) -> (B, 2D)."""
    if x.ndim != 3:
        raise ValueError(f"gsp expects (B, T, D), got {x.shape}")
    if x.shape[1] < 2:
        raise ValueError("gsp needs at least 2 frames for a standard deviation")
    mu = x.mean(axis=1)
    centered = x - mu.reshape(x.shape[0], 1, x.shape[2])
    std = (centered * centered).mean(axis=1).sqrt()
    return concat([mu, std], axis=-1)


def arcface_loss(
    embeddings: Tensor,
    labels: np.ndarray,
    class_weights: Tensor,
    margin: float = 0.2,
    scale: float = 32.0,
) -> Tensor:
    """Additive-angular-margin softmax loss on L2-normalized embeddings and weights."""
    norms = (embeddings * embeddings).sum(axis=-1, keepdims=True).sqrt()
    if np.any(norms.data <= 1e-12):
        raise ValueError("zero-norm embedding cannot be angle-normalized")
    w_norms = (class_weights * class_weights).sum(axis=-1, keepdims=True).sqrt()
    if np.any(w_norms.data <= 1e-12):
        raise ValueError("zero-norm class weight cannot be angle-normalized")
    e_n = embeddings / norms
    w_n = class_weights / w_norms
    cos = e_n @ w_n.swapaxes(-1, -2)  # (B, K)
    sin = (1.0 - cos * cos).relu().sqrt()
    cos_margined = cos * float(np.cos(margin)) - sin * float(np.sin(margin))

    onehot = np.zeros(cos.shape, dtype=cos.dtype)
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    logits = (cos_margined * onehot + cos * (1.0 - onehot)) * scale

    shifted = logits - np.max(logits.data, axis=-1, keepdims=True)
    log_norm = shifted.exp().sum(axis=-1, keepdims=True).log()
    log_probs = shifted - log_norm
    return -(log_probs * onehot).sum(axis=-1).mean()


def bce_loss(probs: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean binary cross-entropy over (optionally masked) speaker-frame cells."""
    targets = np.asarray(targets, dtype=probs.dtype)
    p = probs.clip(1e-7, 1.0 - 1e-7)
    cell = -(p.log() * targets + (1.0 - p).log() * (1.0 - targets))
    if mask is None:
        return cell.mean()
    mask = np.broadcast_to(np.asarray(mask, dtype=probs.dtype), cell.shape)
    total = float(mask.sum())
    if total == 0:
        raise ValueError("bce mask excludes every cell")
    return (cell * mask).sum() * (1.0 / total)
