"""Model assemblies: speaker-embedding network and the SC / MC TS-VAD detectors.

The multi-channel model differs from the single-channel one only by the
cross-channel self-attention stack fused (mean-pooled) over channels before
the shared back end: per-speaker time encoder, BiLSTM over the concatenated
detection states, and a sigmoid output per speaker slot.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, concat
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_checkpoint_config,
    save_checkpoint,
)
from .features import FbankConfig, Waveform, fbank
from .layers import BiLstm, Linear, ResNetLite, TransformerEncoder, arcface_loss, gsp


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    embed_dim: int = 128
    conv_widths: tuple[int, ...] = (16, 32, 64, 128)
    conv_strides: tuple[int, ...] = (1, 2, 2, 2)
    encoder_layers: int = 2
    encoder_heads: int = 4
    ff_mult: int = 4
    lstm_hidden: int = 128
    n_speakers: int = 4
    channel_layers: int = 2
    channel_heads: int = 2
    pe_scale: float = 0.1
    dtype: str = "float32"

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def time_stride(self) -> int:
        return int(np.prod(self.conv_strides))

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @staticmethod
    def from_dict(d: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(ModelConfig):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name in ("conv_widths", "conv_strides"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.name == "dtype":
                kwargs[f.name] = raw
            elif f.name == "pe_scale":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return ModelConfig(**kwargs)


@dataclass(frozen=True)
class TargetSpeakerBank:
    """Fixed-slot matrix of target-speaker embeddings conditioning TS-VAD."""

    embeddings: np.ndarray  # (N, D)
    valid_mask: np.ndarray  # (N,) bool
    speakers: tuple[str, ...] = ()

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        mask = np.asarray(self.valid_mask, dtype=bool)
        if emb.ndim != 2 or mask.shape != (emb.shape[0],):
            raise ValueError("bank must be (N, D) embeddings with an (N,) mask")
        emb = emb.copy()
        emb[~mask] = 0.0  # masked-out slots are zero by invariant
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "valid_mask", mask)
        if not self.speakers:
            object.__setattr__(self, "speakers", tuple(f"slot{i}" for i in range(emb.shape[0])))
        elif len(self.speakers) != emb.shape[0]:
            raise ValueError("speaker names must align with slots")

    @property
    def n_slots(self) -> int:
        return self.embeddings.shape[0]

    @staticmethod
    def from_embeddings(
        embeddings: dict[str, np.ndarray], n_slots: int = 4, dim: int | None = None
    ) -> "TargetSpeakerBank":
        """Pack named embeddings into slots, zero-padding and masking the rest."""
        names = list(embeddings)
        if len(names) > n_slots:
            raise ValueError(f"{len(names)} speakers exceed {n_slots} bank slots")
        if dim is None:
            dim = len(next(iter(embeddings.values())))
        emb = np.zeros((n_slots, dim))
        mask = np.zeros(n_slots, dtype=bool)
        slot_names = []
        for i, name in enumerate(names):
            emb[i] = embeddings[name]
            mask[i] = True
            slot_names.append(name)
        slot_names += [""] * (n_slots - len(names))
        return TargetSpeakerBank(emb, mask, tuple(slot_names))

    def permuted(self, order) -> "TargetSpeakerBank":
        order = list(order)
        return TargetSpeakerBank(
            self.embeddings[order],
            self.valid_mask[order],
            tuple(self.speakers[i] for i in order),
        )


@dataclass(frozen=True)
class DecisionSequence:
    """Per-frame per-slot activity probabilities at the downsampled frame rate."""

    probs: np.ndarray  # (T', N) in [0, 1]
    frame_shift_out: float

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("probs must be (T', N)")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", arr)


def concat_target_frames(frames: Tensor, bank: TargetSpeakerBank) -> Tensor:
    """Pair every frame embedding with every target embedding.

    ``frames`` is (..., T', D); output is (..., T', N, 2D) with the frame
    half independent of the slot axis and the target half independent of time.
    """
    d = frames.shape[-1]
    n = bank.n_slots
    if bank.embeddings.shape[1] != d:
        raise ValueError(
            f"bank dim {bank.embeddings.shape[1]} != frame embedding dim {d}"
        )
    lead = frames.shape[:-1]
    frames_e = frames.reshape(*lead, 1, d).broadcast_to((*lead, n, d))
    bank_np = np.broadcast_to(
        bank.embeddings.astype(frames.dtype), (*lead, n, d)
    )
    return concat([frames_e, Tensor(bank_np)], axis=-1)


class SpeakerEmbedder:
    """ResNet front end + statistics pooling + linear projection to D."""

    arch = "embedder"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = cfg.np_dtype
        self.resnet = ResNetLite(
            cfg.n_mels, cfg.conv_widths, cfg.conv_strides, cfg.embed_dim, rng, dt
        )
        self.pool_proj = Linear(2 * cfg.embed_dim, cfg.embed_dim, rng, dt)

    def frame_embeddings(self, feats: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(feats, dtype=self.cfg.np_dtype)[:, None, :, :])
        return self.resnet(x)

    def embed(self, feats: np.ndarray) -> Tensor:
        return self.pool_proj(gsp(self.frame_embeddings(feats)))

    def embed_waveform(
        self,
        wave: Waveform,
        fbank_cfg: FbankConfig,
        min_duration: float = 2.0,
        normalize: bool = True,
    ) -> np.ndarray:
        """Utterance embedding of channel 0; raises below ``min_duration`` seconds."""
        if wave.duration < min_duration:
            raise ValueError(
                f"segment of {wave.duration:.2f}s is below the {min_duration:.2f}s minimum"
            )
        feats = fbank(Waveform(wave.channel(0), wave.sample_rate), fbank_cfg)
        emb = self.embed(feats.data).data[0]
        if normalize:
            norm = float(np.linalg.norm(emb))
            if norm > 0:
                emb = emb / norm
        return emb.astype(np.float64)

    def parameters(self, prefix: str = "embedder") -> dict[str, Tensor]:
        out = self.resnet.parameters(f"{prefix}.fe")
        out.update(self.pool_proj.parameters(f"{prefix}.pool"))
        return out


class ArcFaceHead:
    """Classification head for embedding training (margin 0.2, scale 32)."""

    def __init__(self, n_classes: int, dim: int, rng, dtype=np.float32,
                 margin: float = 0.2, scale: float = 32.0):
        bound = float(np.sqrt(1.0 / dim))
        self.weights = Tensor(
            rng.uniform(-bound, bound, size=(n_classes, dim)).astype(dtype), requires_grad=True
        )
        self.margin = margin
        self.scale = scale

    def loss(self, embeddings: Tensor, labels: np.ndarray) -> Tensor:
        return arcface_loss(embeddings, labels, self.weights, self.margin, self.scale)

    def parameters(self, prefix: str = "arcface") -> dict[str, Tensor]:
        return {f"{prefix}.w": self.weights}


class _TsvadBackEnd:
    """Shared back end: per-speaker time encoder -> BiLSTM -> sigmoid outputs."""

    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.np_dtype
        width = 2 * cfg.embed_dim
        self.speaker_encoder = TransformerEncoder(
            width,
            cfg.encoder_layers,
            cfg.encoder_heads,
            cfg.ff_mult * width,
            rng,
            dt,
            positional=True,
            pe_scale=cfg.pe_scale,
        )
        self.bilstm = BiLstm(cfg.n_speakers * width, cfg.lstm_hidden, rng, dt)
        self.out = Linear(2 * cfg.lstm_hidden, cfg.n_speakers, rng, dt)
        self.width = width
        self.n_speakers = cfg.n_speakers
        if cfg.lstm_hidden >= cfg.n_speakers:
            self._slot_aligned_init(rng, dt)

    def _slot_aligned_init(self, rng, dt):
        """Start the BiLSTM + output path as a near-per-slot readout.

        At random init the recurrent fusion scrambles which slot's detection
        state reaches which output column, which stalls desk-scale training
        on a base-rate plateau. Blocking the candidate-gate input weights and
        the output layer per slot (with open input/output gates and a weak
        forget gate) makes the joint path behave like a per-slot projection
        at step 0; training is free to densify all of it afterwards.
        """
        n, width, hidden = self.n_speakers, self.width, self.bilstm.hidden
        block = hidden // n
        for direction in (self.bilstm.fwd, self.bilstm.bwd):
            w_ih = np.zeros_like(direction.w_ih.data)
            bound = 1.0 / np.sqrt(width)
            for slot in range(n):
                rows = slice(slot * width, (slot + 1) * width)
                cols = slice(2 * hidden + slot * block, 2 * hidden + (slot + 1) * block)
                w_ih[rows, cols] = rng.uniform(-bound, bound, size=(width, block)).astype(dt)
            direction.w_ih.data[:] = w_ih
            direction.w_hh.data[:] = 0.0
            bias = np.zeros_like(direction.b.data)
            bias[0 * hidden : 1 * hidden] = 2.0  # input gate mostly open
            bias[1 * hidden : 2 * hidden] = -2.0  # forget gate mostly closed
            bias[3 * hidden : 4 * hidden] = 2.0  # output gate mostly open
            direction.b.data[:] = bias
        w_out = np.zeros_like(self.out.w.data)
        bound = 1.0 / np.sqrt(2 * block)
        for slot in range(n):
            for base in (0, hidden):  # forward and backward halves
                rows = slice(base + slot * block, base + slot * block + block)
                w_out[rows, slot] = rng.uniform(-bound, bound, size=block).astype(dt)
        self.out.w.data[:] = w_out

    def detection_states(self, fused: Tensor) -> Tensor:
        """Per-slot encoder outputs, (N, T', 2D); the encoder is shared across slots."""
        return self.speaker_encoder(fused.moveaxis(0, 1), axis=1)

    def __call__(self, fused: Tensor) -> Tensor:
        states = self.detection_states(fused)  # (N, T', 2D)
        t_len = states.shape[1]
        stacked = states.moveaxis(0, 1).reshape(t_len, 1, self.n_speakers * self.width)
        hidden = self.bilstm(stacked)
        return self.out(hidden).sigmoid().reshape(t_len, self.n_speakers)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out = self.speaker_encoder.parameters(f"{prefix}.enc")
        out.update(self.bilstm.parameters(f"{prefix}.lstm"))
        out.update(self.out.parameters(f"{prefix}.out"))
        return out


class SCTSVAD:
    """Single-channel TS-VAD: front end, target pairing, shared back end."""

    arch = "sc"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = cfg.np_dtype
        self.front_end = ResNetLite(
            cfg.n_mels, cfg.conv_widths, cfg.conv_strides, cfg.embed_dim, rng, dt
        )
        self.back_end = _TsvadBackEnd(cfg, rng)

    def forward_tensor(self, feats: np.ndarray, bank: TargetSpeakerBank) -> Tensor:
        feats = np.asarray(feats, dtype=self.cfg.np_dtype)
        if feats.ndim != 3 or feats.shape[0] != 1:
            raise ValueError(f"single-channel model expects (1, T, F), got {feats.shape}")
        frames = self.front_end(Tensor(feats[:, None, :, :]))[0]  # (T', D)
        fused = concat_target_frames(frames, bank)  # (T', N, 2D)
        return self.back_end(fused)

    def forward(self, feats: np.ndarray, bank: TargetSpeakerBank, frame_shift: float = 0.01) -> DecisionSequence:
        probs = self.forward_tensor(feats, bank)
        return DecisionSequence(probs.data, frame_shift * self.cfg.time_stride)

    def output_frames(self, n_input_frames: int) -> int:
        return self.front_end.output_frames(n_input_frames)

    def front_end_parameters(self) -> dict[str, Tensor]:
        return self.front_end.parameters("fe")

    def parameters(self) -> dict[str, Tensor]:
        out = self.front_end.parameters("fe")
        out.update(self.back_end.parameters("be"))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            missing = set(params) ^ set(state)
            raise CheckpointError(f"parameter names mismatch: {sorted(missing)[:5]}")
        for name, tensor in params.items():
            arr = np.asarray(state[name], dtype=tensor.data.dtype)
            if arr.shape != tensor.data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            tensor.data[:] = arr


class MCTSVAD(SCTSVAD):
    """Multi-channel TS-VAD with cross-channel self-attention fusion."""

    arch = "mc"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        width = 2 * cfg.embed_dim
        self.channel_encoder = TransformerEncoder(
            width,
            cfg.channel_layers,
            cfg.channel_heads,
            cfg.ff_mult * width,
            rng,
            cfg.np_dtype,
            positional=False,  # channel order is arbitrary; invariance wanted
        )

    def fuse_channels(self, stacked: Tensor) -> Tensor:
        """Cross-channel encoder + mean pool: (T', N, C, 2D) -> (T', N, 2D)."""
        encoded = self.channel_encoder(stacked, axis=2)
        return encoded.mean(axis=2)

    def forward_tensor(self, feats: np.ndarray, bank: TargetSpeakerBank) -> Tensor:
        feats = np.asarray(feats, dtype=self.cfg.np_dtype)
        if feats.ndim != 3:
            raise ValueError(f"multi-channel model expects (C, T, F), got {feats.shape}")
        frames = self.front_end(Tensor(feats[:, None, :, :]))  # (C, T', D)
        paired = concat_target_frames(frames, bank)  # (C, T', N, 2D)
        stacked = paired.moveaxis(0, 2)  # (T', N, C, 2D)
        fused = self.fuse_channels(stacked)
        return self.back_end(fused)

    def parameters(self) -> dict[str, Tensor]:
        out = super().parameters()
        out.update(self.channel_encoder.parameters("xc"))
        return out


def build_model(arch: str, cfg: ModelConfig, rng: np.random.Generator):
    if arch == "embedder":
        return SpeakerEmbedder(cfg, rng)
    if arch == "sc":
        return SCTSVAD(cfg, rng)
    if arch == "mc":
        return MCTSVAD(cfg, rng)
    raise ValueError(f"unknown architecture {arch!r}")


def save_model(path, model) -> None:
    state = {k: v.data for k, v in model.parameters().items()}
    config = dict(model.cfg.to_dict(), arch=model.arch)
    save_checkpoint(path, state, config)


def load_model(path):
    """Rebuild a model from its checkpoint plus the self-describing config sidecar."""
    config = load_checkpoint_config(path)
    arch = config.pop("arch", None)
    if arch is None:
        raise CheckpointError(f"{path}: config sidecar carries no 'arch' key")
    cfg = ModelConfig.from_dict(config)
    model = build_model(arch, cfg, np.random.default_rng(0))
    state = load_checkpoint(path)
    if arch == "embedder":
        params = model.parameters()
        if set(params) != set(state):
            raise CheckpointError(f"{path}: parameter names mismatch")
        for name, tensor in params.items():
            tensor.data[:] = np.asarray(state[name], dtype=tensor.data.dtype)
    else:
        model.load_state_dict(state)
    return model


def average_models(paths) -> dict[str, np.ndarray]:
    """Element-wise mean over checkpoints (5-best averaging)."""
    from .checkpoint import average_checkpoints

    return average_checkpoints(paths)
