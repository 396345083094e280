"""The two avatar-conditioned extraction architectures.

Both variants share the same skeleton: a strided 1-D convolution maps the
mixture waveform to an N x d feature map, a learned embedding stack maps
the reference clip to a d-dimensional avatar, attention blocks turn the
(avatar-modulated) features into a mask, and a transposed convolution
maps the masked features back to a waveform of exactly the input length.

* V1 gates each frame once by its similarity to the avatar (a sigmoid
  position mask), then refines the gated map with a stack of
  self-attention blocks into the activation mask.
* V2 first contextualizes the features with self-attention blocks, then
  builds the mask with conditional attention blocks that re-inject the
  avatar into every query, starting from a zero stream.

Checkpoints serialize the full model configuration plus every named
parameter; ``load_checkpoint(save_checkpoint(m))`` is bit-exact.
"""

import io
import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    ConditionalAttentionBlock,
    Module,
    SelfAttentionBlock,
    glorot,
    positional_encoding,
    zeros_param,
)
from .errors import CheckpointError, ConfigError, DataError, ShapeError
from .seeding import substream

MASK_NONLINEARITIES = ("sigmoid", "relu", "none")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; everything a checkpoint must restore.

    The usual ablation menu is hidden in {128, 256, 512} and blocks in
    {1, 3, 5, 8}, but any consistent sizes are accepted.  ``heads=None``
    resolves to 4 when hidden == 128 and 8 otherwise.  ``emb_kernel`` and
    ``emb_stride`` give the avatar embedding stack its own, coarser
    analysis geometry so long reference clips stay cheap.
    """

    variant: str = "v1"
    hidden: int = 256
    blocks: int = 5
    enc_blocks: int = 4
    cond_blocks: int = 4
    heads: int | None = None
    kernel: int = 16
    stride: int = 8
    dropout: float = 0.1
    mask_nonlinearity: str = "sigmoid"
    positional_encoding: bool = True
    emb_kernel: int = 64
    emb_stride: int = 32
    sample_rate: int = 16000
    codec_init: str = "fourier"

    @property
    def head_count(self):
        if self.heads is not None:
            return self.heads
        return 4 if self.hidden == 128 else 8

    def validate(self):
        if self.variant not in ("v1", "v2"):
            raise ConfigError(f"unknown variant {self.variant!r}, expected v1 or v2")
        if self.hidden < 1:
            raise ConfigError(f"hidden size must be positive, got {self.hidden}")
        if self.hidden % self.head_count != 0:
            raise ConfigError(
                f"hidden size {self.hidden} not divisible by {self.head_count} heads")
        if not (self.kernel >= self.stride >= 1):
            raise ConfigError(
                f"need kernel >= stride >= 1, got kernel={self.kernel} stride={self.stride}")
        if not (self.emb_kernel >= self.emb_stride >= 1):
            raise ConfigError(
                f"need emb_kernel >= emb_stride >= 1, got {self.emb_kernel}/{self.emb_stride}")
        if self.mask_nonlinearity not in MASK_NONLINEARITIES:
            raise ConfigError(f"mask_nonlinearity must be one of {MASK_NONLINEARITIES}")
        if self.codec_init not in ("fourier", "random"):
            raise ConfigError(f"codec_init must be 'fourier' or 'random', got {self.codec_init!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if min(self.blocks, self.enc_blocks, self.cond_blocks) < 0:
            raise ConfigError("block counts cannot be negative")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate}")
        return self

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "positional_encoding":
                value = "on" if value else "off"
            elif f.name == "heads":
                value = "auto" if value is None else value
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise CheckpointError(f"malformed config line {line!r}")
            key, value = line.split("=", 1)
            if key not in known:
                raise CheckpointError(f"unknown config key {key!r} in checkpoint")
            if key == "positional_encoding":
                kwargs[key] = value == "on"
            elif key == "heads":
                kwargs[key] = None if value == "auto" else int(value)
            elif key in ("dropout",):
                kwargs[key] = float(value)
            elif key in ("variant", "mask_nonlinearity", "codec_init"):
                kwargs[key] = value
            else:
                kwargs[key] = int(value)
        missing = set(known) - set(kwargs)
        if missing:
            raise CheckpointError(f"checkpoint config missing keys: {sorted(missing)}")
        return cls(**kwargs)


def fourier_rows(n_rows, kernel, spread=False):
    """Rows of the real orthonormal Fourier basis over a ``kernel`` window.

    Row order is DC, cos/sin pairs of rising frequency, then (for even
    kernels) the Nyquist row; ``n_rows == kernel`` is a complete orthogonal
    transform.  With ``spread`` the rows are subsampled evenly across the
    band instead of taken lowest-first (coarse full-band analysis for the
    avatar front end; the codec wants the contiguous low band so that its
    adjoint reconstructs a clean lowpass).
    """
    k = np.arange(kernel)
    rows = [np.full(kernel, 1.0 / math.sqrt(kernel))]
    for m in range(1, (kernel + 1) // 2):
        arg = 2.0 * np.pi * m * (k + 0.5) / kernel
        rows.append(np.sqrt(2.0 / kernel) * np.cos(arg))
        rows.append(np.sqrt(2.0 / kernel) * np.sin(arg))
    if kernel % 2 == 0:
        # Nyquist row; with the half-sample phase the cosine vanishes, so
        # the surviving quadrature is sin(pi (k + 0.5)) == (-1)^k.
        rows.append(np.sin(np.pi * (k + 0.5)) / math.sqrt(kernel))
    rows = np.stack(rows[:kernel])
    if n_rows > kernel:
        raise ConfigError(f"at most {kernel} orthogonal rows exist, asked for {n_rows}")
    if spread and n_rows < kernel:
        picks = np.linspace(0, kernel - 1, n_rows).round().astype(int)
        return rows[picks]
    return rows[:n_rows]


def _init_codec_pairs(weight, kernel, rng, spread=False, adjoint_scale=None):
    """Fill a (channels, 1, kernel) conv weight with +/- filterbank pairs.

    Channel 2j carries basis row j, channel 2j+1 its negation, so that
    ReLU(w x) - ReLU(-w x) linearizes the pair.  Channels beyond the
    available rows get small random filters (extra learned capacity).
    """
    channels = weight.data.shape[0]
    pairs = channels // 2
    rows = fourier_rows(min(pairs, kernel), kernel, spread=spread)
    scale = 1.0 if adjoint_scale is None else adjoint_scale
    data = np.zeros_like(weight.data)
    for j in range(rows.shape[0]):
        data[2 * j, 0, :] = rows[j] * scale
        data[2 * j + 1, 0, :] = -rows[j] * scale
    if 2 * rows.shape[0] < channels:
        limit = 0.3 * math.sqrt(6.0 / (kernel + channels))
        extra = rng.uniform(-limit, limit, size=(channels - 2 * rows.shape[0], 1, kernel))
        data[2 * rows.shape[0] :] = extra.astype(data.dtype)
    weight.data = data


def padded_length(length, kernel, stride):
    """Smallest padded length >= max(length, kernel) whose trailing window
    lands exactly: (padded - kernel) % stride == 0."""
    if length <= kernel:
        return kernel
    overhang = (length - kernel) % stride
    return length if overhang == 0 else length + (stride - overhang)


def frame_count(length, kernel, stride):
    return 1 + (padded_length(length, kernel, stride) - kernel) // stride


class WaveEncoder(Module):
    """Single strided convolution + ReLU from waveform to feature map."""

    def __init__(self, channels, kernel, stride, rng, dtype=np.float32,
                 init="random", spread=False):
        self.kernel = kernel
        self.stride = stride
        self.weight = glorot(rng, kernel, channels, shape=(channels, 1, kernel), dtype=dtype)
        self.bias = zeros_param((channels,), dtype=dtype)
        if init == "fourier":
            _init_codec_pairs(self.weight, kernel, rng, spread=spread)
        self._dtype = dtype

    def __call__(self, x):
        """Returns (features, original_length); pads on the right so every
        sample is covered by some analysis window."""
        x = np.asarray(x)
        if x.ndim != 1 or x.size == 0:
            raise DataError(f"encoder expects a non-empty 1-D waveform, got shape {x.shape}")
        original = x.size
        padded = padded_length(original, self.kernel, self.stride)
        buf = np.zeros(padded, dtype=self._dtype)
        buf[:original] = x
        frames = ad.conv1d(Tensor(buf.reshape(1, -1)), self.weight, self.stride)
        return ad.relu(ad.add(ad.transpose(frames), self.bias)), original


class WaveDecoder(Module):
    """Single transposed convolution (overlap-add) back to waveform."""

    def __init__(self, channels, kernel, stride, rng, dtype=np.float32, init="random"):
        self.kernel = kernel
        self.stride = stride
        self.weight = glorot(rng, channels, kernel, shape=(channels, 1, kernel), dtype=dtype)
        self.bias = zeros_param((1,), dtype=dtype)
        if init == "fourier":
            # Adjoint of the encoder filterbank; interior samples are covered
            # kernel/stride times, which the scale folds back to unity.
            _init_codec_pairs(self.weight, kernel, rng, adjoint_scale=stride / kernel)

    def __call__(self, features, original_length):
        n = features.shape[0]
        if frame_count(original_length, self.kernel, self.stride) != n:
            raise DataError(
                f"cannot decode {n} frames to {original_length} samples with "
                f"kernel={self.kernel} stride={self.stride}")
        wave = ad.conv_transpose1d(ad.transpose(features), self.weight, self.stride)
        wave = ad.add(wave, self.bias)
        return ad.reshape(wave[:, :original_length], (original_length,))


class AvatarEncoder(Module):
    """Reference speech -> d-vector: its own conv front end, two
    self-attention blocks, then a mean over frames.  Trained jointly with
    the extraction stack."""

    def __init__(self, channels, kernel, stride, heads, dropout, rng, dtype=np.float32,
                 init="random"):
        self.conv = WaveEncoder(channels, kernel, stride, rng, dtype=dtype,
                                init=init, spread=True)
        self.sab1 = SelfAttentionBlock(channels, heads, dropout, rng, dtype=dtype)
        self.sab2 = SelfAttentionBlock(channels, heads, dropout, rng, dtype=dtype)

    def __call__(self, reference, train=False, rng=None):
        reference = np.asarray(reference)
        if reference.size < self.conv.kernel:
            raise DataError(
                f"reference clip of {reference.size} samples is shorter than one "
                f"analysis window ({self.conv.kernel} samples)")
        feat, _ = self.conv(reference)
        feat = self.sab1(feat, train, rng)
        feat = self.sab2(feat, train, rng)
        return ad.mean(feat, axis=0)


def _apply_mask_nonlinearity(h, kind):
    if kind == "sigmoid":
        return ad.sigmoid(h)
    if kind == "relu":
        return ad.relu(h)
    return h


class AvatrModel(Module):
    """Shared skeleton: codec, avatar embedding, config bookkeeping."""

    def __init__(self, config, rng, dtype=np.float32):
        config.validate()
        d = config.hidden
        self.config = config
        self.dtype = dtype
        self.encoder = WaveEncoder(d, config.kernel, config.stride, rng, dtype=dtype,
                                   init=config.codec_init)
        self.decoder = WaveDecoder(d, config.kernel, config.stride, rng, dtype=dtype,
                                   init=config.codec_init)
        self.embed = AvatarEncoder(d, config.emb_kernel, config.emb_stride,
                                   config.head_count, config.dropout, rng, dtype=dtype,
                                   init=config.codec_init)

    def compute_avatar(self, reference, train=False, rng=None):
        return self.embed(np.asarray(reference, dtype=self.dtype), train, rng)

    def apply_position_mask(self, features, avatar):
        """Gate each frame by sigmoid(<frame, avatar>); widths must match."""
        d = features.shape[1]
        if avatar.shape != (d,):
            raise ShapeError("position_mask", features.shape, avatar.shape)
        gate = ad.sigmoid(ad.matmul(features, ad.reshape(avatar, (d, 1))))
        return ad.mul(features, gate)

    def _pe(self, n):
        return positional_encoding(n, self.config.hidden, dtype=self.dtype)

    def forward(self, mixture, reference, train=False, rng=None):
        raise NotImplementedError

    def extract(self, mixture, reference):
        """Eval-mode forward pass returning a plain numpy waveform."""
        return self.forward(mixture, reference).data


class AvatrV1(AvatrModel):
    """Gate-once variant: position mask, then L self-attention blocks."""

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__(config, rng, dtype=dtype)
        self.sabs = [
            SelfAttentionBlock(config.hidden, config.head_count, config.dropout, rng, dtype=dtype)
            for _ in range(config.blocks)
        ]

    def forward(self, mixture, reference, train=False, rng=None):
        features, original = self.encoder(np.asarray(mixture, dtype=self.dtype))
        avatar = self.compute_avatar(reference, train, rng)
        gated = self.apply_position_mask(features, avatar)
        h = ad.add(gated, self._pe(gated.shape[0])) if self.config.positional_encoding else gated
        for sab in self.sabs:
            h = sab(h, train, rng)
        mask = _apply_mask_nonlinearity(h, self.config.mask_nonlinearity)
        return self.decoder(ad.mul(features, mask), original)


class AvatrV2(AvatrModel):
    """Encoder/decoder variant: E self-attention blocks contextualize the
    features, then K conditional blocks grow the mask from a zero stream,
    re-injecting the avatar at every block."""

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__(config, rng, dtype=dtype)
        self.enc_sabs = [
            SelfAttentionBlock(config.hidden, config.head_count, config.dropout, rng, dtype=dtype)
            for _ in range(config.enc_blocks)
        ]
        self.cabs = [
            ConditionalAttentionBlock(config.hidden, config.head_count, config.dropout,
                                      rng, dtype=dtype)
            for _ in range(config.cond_blocks)
        ]

    def forward(self, mixture, reference, train=False, rng=None):
        features, original = self.encoder(np.asarray(mixture, dtype=self.dtype))
        n, d = features.shape
        if not self.cabs:
            # Degenerate config: no mask stream, mask forced to all-ones.
            return self.decoder(features, original)
        context = ad.add(features, self._pe(n)) if self.config.positional_encoding else features
        for sab in self.enc_sabs:
            context = sab(context, train, rng)
        avatar = self.compute_avatar(reference, train, rng)
        y = self._pe(n) if self.config.positional_encoding else Tensor(np.zeros((n, d), dtype=self.dtype))
        for cab in self.cabs:
            y = cab(y, context, avatar, train, rng)
        mask = _apply_mask_nonlinearity(y, self.config.mask_nonlinearity)
        return self.decoder(ad.mul(features, mask), original)


def build_model(config, seed=0, dtype=np.float32):
    """Construct a model with parameters drawn from the init substream."""
    rng = substream(seed, "init")
    cls = AvatrV1 if config.variant == "v1" else AvatrV2
    return cls(config, rng, dtype=dtype)


def init_identity_codec(model):
    """Rewire encoder/decoder into an exact waveform identity.

    Needs kernel == stride (no overlap) and hidden == 2 * kernel: channel
    pairs carry the positive and negative half-waves so that
    ReLU(x) - ReLU(-x) reconstructs x exactly.  Used as the oracle anchor
    for loss plumbing (decode(encode(x)) == x when the mask is all-ones).
    """
    cfg = model.config
    if cfg.kernel != cfg.stride or cfg.hidden != 2 * cfg.kernel:
        raise ConfigError(
            "identity codec needs kernel == stride and hidden == 2 * kernel, "
            f"got kernel={cfg.kernel} stride={cfg.stride} hidden={cfg.hidden}")
    k = cfg.kernel
    enc = np.zeros_like(model.encoder.weight.data)
    dec = np.zeros_like(model.decoder.weight.data)
    for i in range(k):
        enc[i, 0, i] = 1.0
        enc[k + i, 0, i] = -1.0
        dec[i, 0, i] = 1.0
        dec[k + i, 0, i] = -1.0
    model.encoder.weight.data = enc
    model.encoder.bias.data = np.zeros_like(model.encoder.bias.data)
    model.decoder.weight.data = dec
    model.decoder.bias.data = np.zeros_like(model.decoder.bias.data)
    return model


# ---------------------------------------------------------------------------
# checkpoint format: magic, format version, config text, named float32 blobs

CHECKPOINT_MAGIC = b"AVTR"
CHECKPOINT_VERSION = 1


def save_checkpoint(model):
    """Serialize config + parameters to bytes (little-endian float32)."""
    out = io.BytesIO()
    config_bytes = model.config.to_text().encode("utf-8")
    out.write(struct.pack("<4sHI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(config_bytes)))
    out.write(config_bytes)
    params = list(model.named_parameters())
    out.write(struct.pack("<I", len(params)))
    for name, tensor in params:
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", tensor.ndim))
        out.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        out.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        piece = self.blob[self.pos : self.pos + n]
        self.pos += n
        return piece

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(blob, dtype=np.float32):
    """Rebuild a model from ``save_checkpoint`` output, bit-exactly."""
    reader = _Reader(blob)
    magic, version, config_len = reader.unpack("<4sHI")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig.from_text(reader.take(config_len).decode("utf-8"))
    config.validate()
    model = build_model(config, seed=0, dtype=dtype)
    registry = dict(model.named_parameters())
    (count,) = reader.unpack("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        data = np.frombuffer(reader.take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4")
        if name not in registry:
            raise CheckpointError(f"checkpoint parameter {name!r} not in model")
        target = registry[name]
        if tuple(shape) != target.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(shape)}, model expects {target.shape}")
        target.data = data.reshape(shape).astype(dtype)
        seen.add(name)
    if seen != set(registry):
        raise CheckpointError(f"checkpoint missing parameters: {sorted(set(registry) - seen)}")
    if reader.pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return model


def write_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model))


def read_checkpoint(path, dtype=np.float32):
    try:
        with open(path, "rb") as fh:
            return load_checkpoint(fh.read(), dtype=dtype)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
