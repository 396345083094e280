"""SISDR metric and loss, ADAM, plateau scheduling, the episodic training
loop, and regime-aware evaluation.

Training minimizes the expected negative scale-invariant SDR of extracted
speech over online-mixed episodes.  The loss graph is built per episode
with the autodiff engine; evaluation uses the plain-numpy metric.  All
sampling is seeded through named substreams, so a (config, seed) pair
replays bit-identically: equal first-epoch losses and byte-identical
checkpoints.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import EVAL_SNR_DB, MIXTURE_TYPES, Waveform, sample_episode
from .autodiff import Tensor, clip_grad_norm
from .errors import ConfigError, DataError, NumericalError
from .models import build_model, write_checkpoint
from .seeding import substream

SISDR_EPS = 1e-8
_DB_SCALE = 10.0 / math.log(10.0)


def _samples(x):
    return np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)


def sisdr(target, estimate, eps=SISDR_EPS):
    """Scale-invariant signal-to-distortion ratio in dB (higher is better).

    With alpha = <estimate, target> / <target, target> and the projection
    p = alpha * target, returns

        10 * log10((|p|^2 + eps*q) / (|p - estimate|^2 + eps*q))

    where q = |p|^2 + |p - estimate|^2.  The stabilizer is proportional to
    the signal scale, which keeps the value exactly invariant to positive
    rescaling of either argument and caps perfect reconstruction at
    10*log10((1 + eps) / eps), a hair above 80 dB.
    """
    s = _samples(target)
    y = _samples(estimate)
    if s.shape != y.shape:
        raise DataError(f"sisdr length mismatch: {s.shape} vs {y.shape}")
    ss = float(s @ s)
    if ss == 0.0:
        raise DataError("sisdr is undefined for an all-zero target")
    alpha = float(y @ s) / ss
    proj = alpha * s
    err = proj - y
    p = float(proj @ proj)
    e = float(err @ err)
    q = p + e
    if q == 0.0:  # all-zero estimate: no scale to speak of
        q = 1.0
    return 10.0 * math.log10((p + eps * q) / (e + eps * q))


def sisdr_loss(target, estimate, eps=SISDR_EPS):
    """Differentiable negative SISDR of an autodiff ``estimate`` tensor.

    Same scale-relative stabilizer as ``sisdr`` plus an absolute 1e-30
    floor so an exactly-zero graph never produces log(0).
    """
    s = np.asarray(_samples(target), dtype=estimate.dtype)
    ss = float(s @ s)
    if ss == 0.0:
        raise DataError("sisdr is undefined for an all-zero target")
    const = Tensor(s)
    alpha = ad.scalar_mul(ad.sum_(ad.mul(estimate, const)), 1.0 / ss)
    proj = ad.mul(alpha, const)
    err = ad.sub(proj, estimate)
    p = ad.sum_(ad.mul(proj, proj))
    e = ad.sum_(ad.mul(err, err))
    floor = ad.add(ad.scalar_mul(ad.add(p, e), eps), 1e-30)
    value = ad.scalar_mul(ad.sub(ad.log(ad.add(p, floor)), ad.log(ad.add(e, floor))),
                          _DB_SCALE)
    return ad.scalar_mul(value, -1.0)


def episodic_loss(episodes, model, train=False, rng=None):
    """Mean negative SISDR over a batch of episodes, end-to-end
    differentiable through the model."""
    losses = []
    for ep in episodes:
        if ep.mixture.sample_rate != model.config.sample_rate:
            raise DataError(
                f"episode at {ep.mixture.sample_rate} Hz fed to a "
                f"{model.config.sample_rate} Hz model")
        out = model.forward(ep.mixture.samples, ep.reference.samples, train=train, rng=rng)
        losses.append(ad.reshape(sisdr_loss(ep.target.samples, out), (1,)))
    if len(losses) == 1:
        return ad.reshape(losses[0], ())
    return ad.mean(ad.concat(losses, axis=0))


class Adam(object):
    """Bias-corrected ADAM with per-parameter first/second moment state.

    A parameter whose gradient is absent or identically zero is left
    untouched (state included), so an all-zero gradient step is a no-op
    regardless of accumulated momentum.
    """

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for name, p in self.params.items()
        }

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if g is None or not np.any(g):
                continue
            if g.shape != p.data.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape "
                                  f"{p.data.shape} for {name!r}")
            st = self.state[name]
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauScheduler:
    """Halve the learning rate when the validation loss stops improving.

    Improvement means dropping below the best seen value by more than
    ``min_delta``; after ``patience`` consecutive non-improving epochs the
    rate is multiplied by ``factor``, never below ``min_lr``.
    """

    def __init__(self, lr, factor=0.5, patience=10, min_delta=1e-4, min_lr=1e-7):
        if not 0.0 < factor < 1.0:
            raise ConfigError(f"plateau factor must be in (0, 1), got {factor}")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss):
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


@dataclass
class TrainConfig:
    """Optimization protocol knobs; see ``validate`` for the legal ranges."""

    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_delta: float = 1e-4
    min_lr: float = 1e-7
    seed: int = 0
    clip_seconds: float = 3.0
    ref_seconds: float = 2.0
    batches_per_epoch: int = 8
    val_episodes: int = 16
    eval_episodes: int = 100
    mixture_type: str = "s+s"
    grad_clip: float = 5.0  # global L2 norm; 0 disables clipping

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau factor must be in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1 or self.batches_per_epoch < 1:
            raise ConfigError("max_epochs and batches_per_epoch must be >= 1")
        if self.val_episodes < 1 or self.eval_episodes < 1:
            raise ConfigError("episode counts must be >= 1")
        if min(self.clip_seconds, self.ref_seconds) <= 0:
            raise ConfigError("clip lengths must be positive")
        if self.mixture_type not in MIXTURE_TYPES:
            raise ConfigError(f"mixture_type must be one of {MIXTURE_TYPES}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau patience must be >= 1, got {self.plateau_patience}")
        return self


@dataclass
class TrainResult:
    model: object
    best_epoch: int
    best_val_loss: float
    val_input_sisdr: float
    log_rows: list = field(default_factory=list)  # (epoch, train, val, lr)

    @property
    def best_val_sisdr(self):
        return -self.best_val_loss

    @property
    def val_improvement_db(self):
        return self.best_val_sisdr - self.val_input_sisdr


def _format_row(epoch, train_loss, val_loss, lr):
    return f"{epoch},{train_loss!r},{val_loss!r},{lr!r}"


def write_training_log(path, rows, header_lines=()):
    with open(path, "w", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("epoch,train_loss,val_loss,lr\n")
        for row in rows:
            fh.write(_format_row(*row) + "\n")


def run_training(manifest, model_config, train_config, checkpoint_path=None,
                 log_path=None, log_header=(), on_epoch=None):
    """Episodic training with online mixing.

    Per epoch: sample fresh seeded batches from the train split, descend
    the negative-SISDR loss with ADAM (optionally norm-clipped), score a
    fixed 0 dB validation set, and step the plateau scheduler.  The
    parameters from the best validation epoch are restored at the end and
    written to ``checkpoint_path`` when given.

    Raises:
        NumericalError: if a batch loss goes non-finite (with epoch,
            batch, and seed in the message for replay).
    """
    model_config.validate()
    tc = train_config.validate()
    model = build_model(model_config, seed=tc.seed)
    params = dict(model.named_parameters())
    optimizer = Adam(params, tc.lr)
    scheduler = PlateauScheduler(tc.lr, tc.plateau_factor, tc.plateau_patience,
                                 tc.min_delta, tc.min_lr)
    dropout_rng = substream(tc.seed, "dropout")

    # The validation set is fixed and regenerated identically each run:
    # 0 dB SNR removes mixing randomness from the model-selection signal.
    val_episodes = [
        sample_episode(manifest, substream(tc.seed, "val-episodes", i), split="val",
                       mixture_type=tc.mixture_type, snr_db=EVAL_SNR_DB,
                       clip_seconds=tc.clip_seconds, ref_seconds=tc.ref_seconds,
                       sample_rate=model_config.sample_rate)
        for i in range(tc.val_episodes)
    ]
    val_input = float(np.mean([sisdr(ep.target, ep.mixture) for ep in val_episodes]))

    best_val = math.inf
    best_epoch = 0
    best_state = {name: p.data.copy() for name, p in params.items()}
    rows = []
    for epoch in range(1, tc.max_epochs + 1):
        batch_losses = []
        for b in range(tc.batches_per_epoch):
            episodes = [
                sample_episode(manifest, substream(tc.seed, "episodes", epoch, b, i),
                               split="train", mixture_type=tc.mixture_type,
                               clip_seconds=tc.clip_seconds, ref_seconds=tc.ref_seconds,
                               sample_rate=model_config.sample_rate)
                for i in range(tc.batch_size)
            ]
            loss = episodic_loss(episodes, model, train=True, rng=dropout_rng)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, batch {b} "
                    f"(seed {tc.seed})")
            optimizer.zero_grad()
            loss.backward()
            if tc.grad_clip > 0:
                clip_grad_norm(params.values(), tc.grad_clip)
            optimizer.step()
            batch_losses.append(loss_value)

        val_loss = float(np.mean([
            -sisdr(ep.target, model.forward(ep.mixture.samples, ep.reference.samples).data)
            for ep in val_episodes
        ]))
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch} (seed {tc.seed})")
        lr = scheduler.step(val_loss)
        optimizer.lr = lr
        train_loss = float(np.mean(batch_losses))
        rows.append((epoch, train_loss, val_loss, lr))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in params.items()}
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss, lr)

    for name, p in params.items():
        p.data = best_state[name]
    if checkpoint_path is not None:
        write_checkpoint(model, checkpoint_path)
    if log_path is not None:
        write_training_log(log_path, rows, log_header)
    return TrainResult(model=model, best_epoch=best_epoch, best_val_loss=best_val,
                       val_input_sisdr=val_input, log_rows=rows)


@dataclass
class EvalReport:
    """Per-episode SISDR lists plus summary statistics and a 1 dB histogram.

    The spread is the standard error of the mean (sample std / sqrt(n)),
    labeled as such everywhere it is printed.
    """

    output_sisdr: list
    input_sisdr: list
    mean: float
    stderr: float
    input_mean: float
    hist_edges: list
    hist_counts: list

    @property
    def improvement_db(self):
        return self.mean - self.input_mean

    def summary_line(self):
        return (f"episodes={len(self.output_sisdr)} mean_output_sisdr_db={self.mean:.4f} "
                f"stderr_db={self.stderr:.4f} mean_input_sisdr_db={self.input_mean:.4f} "
                f"improvement_db={self.improvement_db:.4f}")

    def write_episodes_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("episode,input_sisdr,output_sisdr\n")
            for i, (a, b) in enumerate(zip(self.input_sisdr, self.output_sisdr)):
                fh.write(f"{i},{a!r},{b!r}\n")

    def write_histogram_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("bin_low_db,bin_high_db,count\n")
            for lo, hi, c in zip(self.hist_edges[:-1], self.hist_edges[1:], self.hist_counts):
                fh.write(f"{lo!r},{hi!r},{c}\n")


def _histogram_1db(values):
    lo = math.floor(min(values))
    hi = max(math.ceil(max(values)), lo + 1)
    edges = np.arange(lo, hi + 1, dtype=np.float64)
    counts, _ = np.histogram(values, bins=edges)
    return edges.tolist(), counts.tolist()


def evaluate(manifest, model, regime, mixture_type, n_episodes, seed=0,
             ref_seconds=2.0, clip_seconds=None):
    """Score ``n_episodes`` 0 dB test-split episodes with the metric.

    The manifest must satisfy the requested regime (open: disjoint
    speakers; closed: unseen clips of training speakers), otherwise a
    DataError is raised before any episode is drawn.  ``clip_seconds=None``
    evaluates on the full clip length.
    """
    manifest.validate_regime(regime)
    out_values, in_values = [], []
    for i in range(n_episodes):
        ep = sample_episode(manifest, substream(seed, "eval", i), split="test",
                            mixture_type=mixture_type, snr_db=EVAL_SNR_DB,
                            clip_seconds=clip_seconds, ref_seconds=ref_seconds,
                            sample_rate=model.config.sample_rate)
        estimate = model.forward(ep.mixture.samples, ep.reference.samples).data
        out_values.append(sisdr(ep.target, estimate))
        in_values.append(sisdr(ep.target, ep.mixture))
    mean = float(np.mean(out_values))
    stderr = float(np.std(out_values, ddof=1) / math.sqrt(len(out_values))) \
        if len(out_values) > 1 else 0.0
    edges, counts = _histogram_1db(out_values)
    return EvalReport(output_sisdr=out_values, input_sisdr=in_values, mean=mean,
                      stderr=stderr, input_mean=float(np.mean(in_values)),
                      hist_edges=edges, hist_counts=counts)
