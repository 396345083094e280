"""Scikit-learn style estimator facade over the extraction pipeline.

``AvatrExtractor`` follows the usual conventions: constructor arguments
are stored verbatim (so ``get_params``/``set_params``/``clone`` work),
``fit`` consumes a corpus manifest and trains episodically, ``predict``
maps (mixture, reference) pairs to extracted waveforms, and ``score``
returns mean SISDR on fresh test episodes.  Fitted state lives in
trailing-underscore attributes.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .models import ModelConfig, load_checkpoint, read_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, run_training
from .validation import as_episode_pair, as_manifest


class AvatrExtractor(BaseEstimator):
    """Target-speaker extractor with a fit/predict surface.

    Args mirror ``ModelConfig`` and ``TrainConfig``; see those classes for
    semantics and legal ranges.  ``heads=None`` picks the default head
    count for the hidden size.

    Example:
        >>> est = AvatrExtractor(variant="v1", hidden=32, blocks=2, heads=4)
        >>> est.fit("corpus/manifest.tsv")          # doctest: +SKIP
        >>> clean = est.predict((mixture, reference))  # doctest: +SKIP
    """

    def __init__(self, variant="v1", hidden=256, blocks=5, enc_blocks=4, cond_blocks=4,
                 heads=None, kernel=16, stride=8, dropout=0.1,
                 mask_nonlinearity="sigmoid", positional_encoding=True,
                 emb_kernel=64, emb_stride=32, codec_init="fourier", sample_rate=16000,
                 lr=1e-4, batch_size=16, max_epochs=100, batches_per_epoch=8,
                 plateau_patience=10, plateau_factor=0.5, min_delta=1e-4, min_lr=1e-7,
                 clip_seconds=3.0, ref_seconds=2.0, val_episodes=16, eval_episodes=100,
                 mixture_type="s+s", grad_clip=5.0, seed=0):
        self.variant = variant
        self.hidden = hidden
        self.blocks = blocks
        self.enc_blocks = enc_blocks
        self.cond_blocks = cond_blocks
        self.heads = heads
        self.kernel = kernel
        self.stride = stride
        self.dropout = dropout
        self.mask_nonlinearity = mask_nonlinearity
        self.positional_encoding = positional_encoding
        self.emb_kernel = emb_kernel
        self.emb_stride = emb_stride
        self.codec_init = codec_init
        self.sample_rate = sample_rate
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.batches_per_epoch = batches_per_epoch
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.min_delta = min_delta
        self.min_lr = min_lr
        self.clip_seconds = clip_seconds
        self.ref_seconds = ref_seconds
        self.val_episodes = val_episodes
        self.eval_episodes = eval_episodes
        self.mixture_type = mixture_type
        self.grad_clip = grad_clip
        self.seed = seed

    def model_config(self):
        return ModelConfig(
            variant=self.variant, hidden=self.hidden, blocks=self.blocks,
            enc_blocks=self.enc_blocks, cond_blocks=self.cond_blocks, heads=self.heads,
            kernel=self.kernel, stride=self.stride, dropout=self.dropout,
            mask_nonlinearity=self.mask_nonlinearity,
            positional_encoding=self.positional_encoding,
            emb_kernel=self.emb_kernel, emb_stride=self.emb_stride,
            codec_init=self.codec_init, sample_rate=self.sample_rate,
        ).validate()

    def train_config(self):
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
            plateau_patience=self.plateau_patience, plateau_factor=self.plateau_factor,
            min_delta=self.min_delta, min_lr=self.min_lr, seed=self.seed,
            clip_seconds=self.clip_seconds, ref_seconds=self.ref_seconds,
            batches_per_epoch=self.batches_per_epoch, val_episodes=self.val_episodes,
            eval_episodes=self.eval_episodes, mixture_type=self.mixture_type,
            grad_clip=self.grad_clip,
        ).validate()

    def fit(self, manifest, y=None, on_epoch=None):
        """Train episodically on a corpus manifest (object or path).

        Returns:
            self, with ``model_``, ``history_`` (log rows), ``best_epoch_``
            and ``val_improvement_db_`` populated.
        """
        manifest = as_manifest(manifest)
        result = run_training(manifest, self.model_config(), self.train_config(),
                              on_epoch=on_epoch)
        self.model_ = result.model
        self.history_ = result.log_rows
        self.best_epoch_ = result.best_epoch
        self.best_val_sisdr_ = result.best_val_sisdr
        self.val_improvement_db_ = result.val_improvement_db
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This AvatrExtractor instance is not fitted yet; call fit() or load().")

    def predict(self, X):
        """Extract the target speaker from (mixture, reference) input.

        ``X`` may be one pair or a sequence of pairs; the output mirrors
        the input arity.  Waveforms may be ``Waveform`` objects or 1-D
        arrays at the trained sample rate.
        """
        self._check_fitted()
        single = (
            isinstance(X, (tuple, list)) and len(X) == 2
            and not isinstance(X[0], (tuple, list))
        )
        pairs = [X] if single else list(X)
        outputs = []
        for pair in pairs:
            mixture, reference = as_episode_pair(pair, self.model_.config.sample_rate)
            outputs.append(self.model_.extract(mixture.samples, reference.samples))
        return outputs[0] if single else outputs

    def transform(self, X):
        """Alias for ``predict``: extraction is a waveform transform."""
        return self.predict(X)

    def score(self, X, y=None, regime="closed", n_episodes=None, seed=0):
        """Mean output SISDR (dB) over fresh test episodes from manifest ``X``."""
        self._check_fitted()
        manifest = as_manifest(X)
        report = evaluate(manifest, self.model_, regime, self.mixture_type,
                          n_episodes or self.eval_episodes, seed=seed,
                          ref_seconds=self.ref_seconds)
        return report.mean

    def save(self, path):
        self._check_fitted()
        with open(path, "wb") as fh:
            fh.write(save_checkpoint(self.model_))
        return self

    @classmethod
    def from_checkpoint(cls, source):
        """Build a ready-to-predict estimator from checkpoint bytes or path."""
        model = load_checkpoint(source) if isinstance(source, (bytes, bytearray)) \
            else read_checkpoint(source)
        cfg = model.config
        est = cls(variant=cfg.variant, hidden=cfg.hidden, blocks=cfg.blocks,
                  enc_blocks=cfg.enc_blocks, cond_blocks=cfg.cond_blocks, heads=cfg.heads,
                  kernel=cfg.kernel, stride=cfg.stride, dropout=cfg.dropout,
                  mask_nonlinearity=cfg.mask_nonlinearity,
                  positional_encoding=cfg.positional_encoding,
                  emb_kernel=cfg.emb_kernel, emb_stride=cfg.emb_stride,
                  codec_init=cfg.codec_init, sample_rate=cfg.sample_rate)
        est.model_ = model
        est.history_ = []
        return est

    def avatar(self, reference):
        """The speaker embedding for a reference clip (numpy d-vector)."""
        self._check_fitted()
        from .validation import as_waveform

        wave = as_waveform(reference, self.model_.config.sample_rate, name="reference")
        return np.asarray(self.model_.compute_avatar(wave.samples).data)
