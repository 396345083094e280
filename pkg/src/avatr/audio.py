"""WAV I/O, SNR-controlled mixing, episodic sampling and a synthetic
desk-scale corpus.

Audio is carried as float64 1-D arrays in [-1, 1] so that gain solving
and achieved-SNR bookkeeping stay exact to well below 1e-6 dB; models
cast to float32 at their input.  Each synthetic "speaker" is a small
generative voice model (fixed fundamental, one formant-like resonance,
a syllabic amplitude envelope with pauses) whose parameters are drawn
once per speaker, so clips of one speaker share a voice and clips of
different speakers are spectrally well separated.
"""

import functools
import os
import warnings
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

SPLITS = ("train", "val", "test")
MIXTURE_TYPES = ("s+s", "s+n", "s+a")
TRAIN_SNR_RANGE = (-4.0, 4.0)
EVAL_SNR_DB = 0.0


@dataclass
class Waveform:
    """Mono audio: samples in [-1, 1] plus the sampling rate in Hz."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


# ---------------------------------------------------------------------------
# WAV files (RIFF PCM16, mono or stereo-downmixed)


def read_wav(path, expect_rate=None):
    """Read a PCM16 WAV file; int16 values map to float via /32768.

    Stereo is downmixed by channel averaging.  A rate different from
    ``expect_rate`` (when given) is an error: resampling is out of scope.
    """
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getcomptype() != "NONE":
                raise DataError(f"{path}: unsupported codec {fh.getcomptype()!r}")
            if fh.getsampwidth() != 2:
                raise DataError(f"{path}: only 16-bit PCM supported, "
                                f"got sample width {fh.getsampwidth()}")
            rate = fh.getframerate()
            channels = fh.getnchannels()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise DataError(f"{path}: malformed WAV file ({exc})") from exc
    except EOFError as exc:
        raise DataError(f"{path}: truncated WAV file") from exc
    if expect_rate is not None and rate != expect_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {expect_rate} Hz")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return Waveform(data, rate)


def write_wav(path, waveform):
    """Write mono PCM16; samples are clamped to [-1, 1] before quantizing."""
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    ints = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(waveform.sample_rate)
        fh.writeframes(ints.tobytes())


@functools.lru_cache(maxsize=128)
def _load_cached(path, stat_key):
    w = read_wav(path)
    w.samples.flags.writeable = False
    return w


def load_clip(path):
    """Cached read; the returned samples are read-only, copy before editing."""
    st = os.stat(path)
    return _load_cached(str(path), (st.st_size, st.st_mtime_ns))


# ---------------------------------------------------------------------------
# length fitting and SNR mixing


def fit_length(x, length, rng, sample_rate, crossfade_seconds=0.010):
    """Crop or tile ``x`` to exactly ``length`` samples.

    Longer signals are randomly cropped; shorter ones are tiled with a
    10 ms linear crossfade at each seam so loops stay click-free.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot fit an empty signal")
    if x.size == length:
        return x
    if x.size > length:
        start = int(rng.integers(0, x.size - length + 1))
        return x[start : start + length]
    cf = min(int(round(crossfade_seconds * sample_rate)), x.size - 1)
    step = x.size - cf
    out = np.zeros(length + x.size)
    ramp_up = np.linspace(0.0, 1.0, cf, endpoint=False) if cf else np.empty(0)
    pos = 0
    first = True
    while pos < length:
        piece = x.copy()
        if cf:
            if not first:
                piece[:cf] *= ramp_up
            # The final fade-out always lands at or beyond the trim point,
            # so interior seams crossfade and the kept tail stays at gain 1.
            piece[x.size - cf :] *= ramp_up[::-1]
        out[pos : pos + x.size] += piece
        pos += step
        first = False
    return out[:length]


@dataclass
class MixResult:
    """Output of ``mix_at_snr``; mixture == target + noise holds bit-exactly.

    ``gain`` is the solved noise gain; ``rescale`` is the joint factor
    (<= 1) applied to everything when the raw mixture peaks above 1, which
    leaves every power ratio, and hence SISDR, untouched.
    """

    mixture: Waveform
    gain: float
    rescale: float
    target: Waveform
    noise: Waveform


def mix_at_snr(speech, noise, snr_db):
    """Scale ``noise`` so that 10 log10(P_s / (g^2 P_n)) == ``snr_db``.

    The closed form is g = sqrt(P_s / P_n) * 10^(-snr_db / 20).  If the
    raw sum peaks above 1 in magnitude, mixture, target, and scaled noise
    are jointly rescaled to the peak.
    """
    rate = speech.sample_rate if isinstance(speech, Waveform) else None
    s = np.asarray(speech.samples if isinstance(speech, Waveform) else speech, dtype=np.float64)
    n = np.asarray(noise.samples if isinstance(noise, Waveform) else noise, dtype=np.float64)
    if isinstance(noise, Waveform) and rate is not None and noise.sample_rate != rate:
        raise DataError(f"mixing rate mismatch: {rate} vs {noise.sample_rate}")
    rate = rate or 16000
    if s.shape != n.shape:
        raise ShapeError("mix_at_snr", s.shape, n.shape)
    p_s = float(np.mean(s * s))
    p_n = float(np.mean(n * n))
    if p_s == 0.0 or p_n == 0.0:
        raise DataError("mix_at_snr needs nonzero-power speech and noise")
    gain = float(np.sqrt(p_s / p_n) * 10.0 ** (-snr_db / 20.0))
    peak = float(np.max(np.abs(s + gain * n)))
    rescale = 1.0 / peak if peak > 1.0 else 1.0
    target = s * rescale
    scaled_noise = n * (gain * rescale)
    mixture = target + scaled_noise
    return MixResult(
        mixture=Waveform(mixture, rate),
        gain=gain,
        rescale=rescale,
        target=Waveform(target, rate),
        noise=Waveform(scaled_noise, rate),
    )


# ---------------------------------------------------------------------------
# corpus manifests


@dataclass
class CorpusManifest:
    """Speech clips grouped by split and speaker, plus noise clips by class.

    The on-disk form is line-oriented text with tab-separated fields:
    ``split<TAB>speaker<TAB>path`` for speech and
    ``noise<TAB>class<TAB>path`` for noise, paths relative to the file.
    """

    speech: dict = field(default_factory=dict)  # split -> speaker -> [paths]
    noise: dict = field(default_factory=dict)   # class -> [paths]

    def add_clip(self, split, speaker, path):
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}, expected one of {SPLITS}")
        self.speech.setdefault(split, {}).setdefault(speaker, []).append(str(path))

    def add_noise(self, noise_class, path):
        self.noise.setdefault(noise_class, []).append(str(path))

    def speakers(self, split):
        return sorted(self.speech.get(split, {}))

    def clips(self, speaker, split=None):
        if split is not None:
            return list(self.speech.get(split, {}).get(speaker, []))
        out = []
        for sp in SPLITS:
            out.extend(self.speech.get(sp, {}).get(speaker, []))
        return out

    def noise_classes(self):
        return sorted(self.noise)

    def save(self, path):
        base = os.path.dirname(os.path.abspath(str(path)))
        lines = []
        for split in SPLITS:
            for speaker in self.speakers(split):
                for clip in self.speech[split][speaker]:
                    rel = os.path.relpath(clip, base)
                    lines.append(f"{split}\t{speaker}\t{rel}")
        for cls in self.noise_classes():
            for clip in self.noise[cls]:
                rel = os.path.relpath(clip, base)
                lines.append(f"noise\t{cls}\t{rel}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        base = os.path.dirname(os.path.abspath(str(path)))
        manifest = cls()
        try:
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    parts = line.split("\t")
                    if len(parts) != 3:
                        raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
                    kind, label, rel = parts
                    full = os.path.join(base, rel)
                    if kind == "noise":
                        manifest.add_noise(label, full)
                    else:
                        manifest.add_clip(kind, label, full)
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        return manifest

    def validate_regime(self, regime):
        """Check the split structure against an evaluation regime.

        open: speaker sets of different splits are pairwise disjoint.
        closed: test (and val, when present) reuse the training speakers
        but with clip sets disjoint from the training clips.
        """
        train = set(self.speakers("train"))
        if not train:
            raise DataError("manifest has no training speakers")
        if regime == "open":
            for split in ("val", "test"):
                overlap = train & set(self.speakers(split))
                if overlap:
                    raise DataError(
                        f"open-set regime violated: speakers {sorted(overlap)} appear "
                        f"in both train and {split}")
            both = set(self.speakers("val")) & set(self.speakers("test"))
            if both:
                raise DataError(
                    f"open-set regime violated: speakers {sorted(both)} appear "
                    f"in both val and test")
        elif regime == "closed":
            for split in ("val", "test"):
                speakers = set(self.speakers(split))
                if not speakers:
                    continue
                if speakers != train:
                    raise DataError(
                        f"closed-set regime violated: {split} speakers differ from train")
                for speaker in speakers:
                    shared = set(self.clips(speaker, "train")) & set(self.clips(speaker, split))
                    if shared:
                        raise DataError(
                            f"closed-set regime violated: speaker {speaker} reuses "
                            f"training clips in {split}")
        else:
            raise DataError(f"unknown regime {regime!r}, expected open or closed")
        return self


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    """One supervised example: mixture, reference, and the clean target.

    ``mixture.samples == target.samples + noise.samples`` holds bit-exactly
    by construction.
    """

    mixture: Waveform
    reference: Waveform
    target: Waveform
    noise: Waveform
    speaker_id: str
    snr_db: float
    interferer_id: str = ""
    rescale: float = 1.0
    target_clip: str = ""
    reference_clip: str = ""


_ACTIVE_POWER_FLOOR = 1e-7
_MAX_CROP_ATTEMPTS = 32


def _active_crop(samples, need, rng, rate, what):
    """Crop to ``need`` samples, re-drawing if the crop lands in a pause
    (mean-square power below the activity floor)."""
    for _ in range(_MAX_CROP_ATTEMPTS):
        crop = fit_length(samples, need, rng, rate)
        if float(np.mean(crop * crop)) >= _ACTIVE_POWER_FLOOR:
            return crop
    raise DataError(f"could not draw an active {what} crop of {need} samples "
                    f"in {_MAX_CROP_ATTEMPTS} attempts")


def _eligible_speakers(manifest, split):
    eligible, skipped = [], []
    for speaker in manifest.speakers(split):
        if len(manifest.clips(speaker)) >= 2:
            eligible.append(speaker)
        else:
            skipped.append(speaker)
    if skipped:
        warnings.warn(
            f"speakers {skipped} have a single clip and cannot supply a disjoint "
            "reference; skipping them", stacklevel=3)
    return eligible


def sample_episode(manifest, rng, split="train", mixture_type="s+s", snr_db=None,
                   clip_seconds=3.0, ref_seconds=2.0, sample_rate=None):
    """Draw one episode: target crop, disjoint same-speaker reference crop,
    and an interferer bundle mixed at the requested SNR.

    Training draws SNR uniformly from [-4, 4] dB; validation and test use
    exactly 0 dB unless ``snr_db`` overrides.  For "s+a" the interfering
    speech and the ambient noise are summed before the gain is solved.
    ``clip_seconds=None`` keeps the target clip at full length.
    """
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    if mixture_type not in MIXTURE_TYPES:
        raise DataError(f"unknown mixture type {mixture_type!r}, expected {MIXTURE_TYPES}")
    eligible = _eligible_speakers(manifest, split)
    if not eligible:
        raise DataError(f"no speaker in split {split!r} has two or more clips")

    speaker = eligible[int(rng.integers(len(eligible)))]
    split_clips = manifest.clips(speaker, split)
    target_clip = split_clips[int(rng.integers(len(split_clips)))]
    ref_pool = [c for c in manifest.clips(speaker) if c != target_clip]
    ref_clip = ref_pool[int(rng.integers(len(ref_pool)))]

    target_wav = load_clip(target_clip)
    rate = target_wav.sample_rate
    if sample_rate is not None and rate != sample_rate:
        raise DataError(f"{target_clip}: sample rate {rate}, expected {sample_rate}")
    if clip_seconds is None:
        need = len(target_wav)
        target = np.asarray(target_wav.samples, dtype=np.float64)
    else:
        need = int(round(clip_seconds * rate))
        target = _active_crop(target_wav.samples, need, rng, rate, "target")

    ref_wav = load_clip(ref_clip)
    if ref_wav.sample_rate != rate:
        raise DataError(f"{ref_clip}: sample rate {ref_wav.sample_rate} != {rate}")
    reference = _active_crop(ref_wav.samples, int(round(ref_seconds * rate)), rng, rate,
                             "reference")

    interferer_id = ""
    bundle = np.zeros(need)
    if mixture_type in ("s+s", "s+a"):
        others = [s for s in eligible if s != speaker] or \
            [s for s in manifest.speakers(split) if s != speaker]
        if not others:
            raise DataError(
                f"mixture type {mixture_type!r} needs at least two speakers in "
                f"split {split!r}, found one")
        interferer_id = others[int(rng.integers(len(others)))]
        int_clips = manifest.clips(interferer_id, split)
        int_clip = int_clips[int(rng.integers(len(int_clips)))]
        int_wav = load_clip(int_clip)
        if int_wav.sample_rate != rate:
            raise DataError(f"{int_clip}: sample rate {int_wav.sample_rate} != {rate}")
        bundle = bundle + _active_crop(int_wav.samples, need, rng, rate, "interferer")
    if mixture_type in ("s+n", "s+a"):
        classes = manifest.noise_classes()
        if not classes:
            raise DataError(f"mixture type {mixture_type!r} needs noise clips in the manifest")
        cls = classes[int(rng.integers(len(classes)))]
        noise_clip = manifest.noise[cls][int(rng.integers(len(manifest.noise[cls])))]
        noise_wav = load_clip(noise_clip)
        if noise_wav.sample_rate != rate:
            raise DataError(f"{noise_clip}: sample rate {noise_wav.sample_rate} != {rate}")
        bundle = bundle + fit_length(noise_wav.samples, need, rng, rate)

    if snr_db is None:
        if split == "train":
            snr_db = float(rng.uniform(*TRAIN_SNR_RANGE))
        else:
            snr_db = EVAL_SNR_DB
    mixed = mix_at_snr(Waveform(target, rate), Waveform(bundle, rate), snr_db)
    return Episode(
        mixture=mixed.mixture,
        reference=Waveform(reference, rate),
        target=mixed.target,
        noise=mixed.noise,
        speaker_id=speaker,
        snr_db=snr_db,
        interferer_id=interferer_id,
        rescale=mixed.rescale,
        target_clip=target_clip,
        reference_clip=ref_clip,
    )


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SpeakerVoice:
    """Generative parameters fixed per synthetic speaker."""

    f0_hz: float
    formant_hz: float
    formant_octaves: float
    tilt: float
    am_rate_hz: float
    pause_fraction: float


def _draw_voices(n_speakers, rng, sample_rate):
    # Distinct-by-construction fundamentals and resonances: log-spaced
    # grids shuffled independently, plus per-speaker texture parameters.
    top = min(3800.0, 0.42 * sample_rate)
    f0s = np.geomspace(85.0, 340.0, n_speakers)
    formants = np.geomspace(320.0, top, n_speakers)
    f0s = f0s[rng.permutation(n_speakers)]
    formants = formants[rng.permutation(n_speakers)]
    voices = []
    for i in range(n_speakers):
        voices.append(SpeakerVoice(
            f0_hz=float(f0s[i]),
            formant_hz=float(formants[i]),
            formant_octaves=float(rng.uniform(0.3, 0.55)),
            tilt=float(rng.uniform(0.2, 0.7)),
            am_rate_hz=float(rng.uniform(2.5, 6.0)),
            pause_fraction=float(rng.uniform(0.15, 0.3)),
        ))
    return voices


def _smooth_noise(n, control_hz, sample_rate, rng):
    points = max(2, int(np.ceil(n * control_hz / sample_rate)) + 1)
    ctrl = rng.normal(size=points)
    xs = np.linspace(0.0, points - 1.0, n)
    return np.interp(xs, np.arange(points), ctrl)


def synth_utterance(voice, duration, sample_rate, rng):
    """One random 'utterance' from a speaker's voice model: a harmonic
    stack with the speaker's resonance shape, slow pitch wobble, and a
    syllabic amplitude envelope with pauses."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = voice.f0_hz * (1.0 + 0.02 * _smooth_noise(n, 6.0, sample_rate, rng))
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = max(2, min(40, int((0.45 * sample_rate) // voice.f0_hz)))
    k = np.arange(1, n_harm + 1)
    resonance = np.exp(-0.5 * (np.log2(k * voice.f0_hz / voice.formant_hz)
                               / voice.formant_octaves) ** 2)
    amps = resonance / k ** voice.tilt
    amps /= np.sum(amps)
    phis = rng.uniform(0.0, 2.0 * np.pi, size=n_harm)
    x = np.zeros(n)
    for i in range(n_harm):
        x += amps[i] * np.sin(k[i] * phase + phis[i])
    # Syllabic envelope: raised sine at the speaker's rate, gated by a
    # smoothed pause process so frames alternate in dominance.
    syllable = 0.55 + 0.45 * np.sin(2.0 * np.pi * voice.am_rate_hz * t
                                    + rng.uniform(0.0, 2.0 * np.pi))
    gate_ctrl = _smooth_noise(n, 3.0, sample_rate, rng)
    threshold = np.quantile(gate_ctrl, voice.pause_fraction)
    gate = np.clip((gate_ctrl - threshold) / 0.25, 0.0, 1.0)
    x *= syllable * gate
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= rng.uniform(0.4, 0.6) / peak
    return x


def synth_noise(kind, duration, sample_rate, rng):
    """Noise clip generators: white, pink (1/f-shaped), or a tone sweep."""
    n = int(round(duration * sample_rate))
    if kind == "white":
        x = rng.normal(size=n)
    elif kind == "pink":
        spectrum = np.fft.rfft(rng.normal(size=n))
        freqs = np.maximum(np.fft.rfftfreq(n, 1.0 / sample_rate), 1.0)
        x = np.fft.irfft(spectrum / np.sqrt(freqs), n=n)
    elif kind == "sweep":
        lo, hi = 100.0, 0.45 * sample_rate
        t = np.arange(n) / sample_rate
        span = t[-1] if n > 1 else 1.0
        freq = lo * (hi / lo) ** (t / span)
        phase = 2.0 * np.pi * np.cumsum(freq) / sample_rate
        x = np.sin(phase)
    else:
        raise DataError(f"unknown noise kind {kind!r}")
    return 0.3 * x / np.max(np.abs(x))


@dataclass
class SynthCorpus:
    manifest: CorpusManifest
    manifest_path: str
    voices: dict  # speaker_id -> SpeakerVoice


def _split_speakers(speaker_ids, rng):
    n = len(speaker_ids)
    if n < 3:
        raise DataError(f"open-set corpus needs at least 3 speakers, got {n}")
    order = [speaker_ids[i] for i in rng.permutation(n)]
    n_val = max(1, round(n / 4))
    n_test = max(1, round(n / 4))
    return {
        "train": order[: n - n_val - n_test],
        "val": order[n - n_val - n_test : n - n_test],
        "test": order[n - n_test :],
    }


def _split_clips(paths, rng):
    n = len(paths)
    if n < 3:
        raise DataError(f"closed-set corpus needs at least 3 clips per speaker, got {n}")
    order = [paths[i] for i in rng.permutation(n)]
    n_val = max(1, n // 5)
    n_test = max(1, n // 5)
    return {
        "train": order[: n - n_val - n_test],
        "val": order[n - n_val - n_test : n - n_test],
        "test": order[n - n_test :],
    }


def synth_corpus_generate(out_dir, n_speakers, clips_per_speaker, seed=0,
                          sample_rate=16000, clip_seconds=3.0, regime="closed",
                          noise_per_class=3):
    """Write a synthetic corpus (WAV files + manifest) under ``out_dir``.

    The manifest encodes the requested regime: speaker-level splits for
    open-set, clip-level splits for closed-set; both are validated before
    return.  Returns the manifest, its path, and the voice models.
    """
    from .seeding import substream

    if n_speakers < 2:
        raise DataError(f"corpus needs at least 2 speakers, got {n_speakers}")
    out_dir = str(out_dir)
    speech_dir = os.path.join(out_dir, "speech")
    noise_dir = os.path.join(out_dir, "noise")
    os.makedirs(speech_dir, exist_ok=True)
    os.makedirs(noise_dir, exist_ok=True)

    voice_rng = substream(seed, "corpus-voices")
    voices = _draw_voices(n_speakers, voice_rng, sample_rate)
    speaker_ids = [f"spk{i:03d}" for i in range(n_speakers)]

    clips = {}
    for i, speaker in enumerate(speaker_ids):
        sp_dir = os.path.join(speech_dir, speaker)
        os.makedirs(sp_dir, exist_ok=True)
        clips[speaker] = []
        for j in range(clips_per_speaker):
            rng = substream(seed, "corpus-clip", i, j)
            x = synth_utterance(voices[i], clip_seconds, sample_rate, rng)
            path = os.path.join(sp_dir, f"clip{j:02d}.wav")
            write_wav(path, Waveform(x, sample_rate))
            clips[speaker].append(path)

    manifest = CorpusManifest()
    split_rng = substream(seed, "corpus-split")
    if regime == "open":
        assignment = _split_speakers(speaker_ids, split_rng)
        for split, members in assignment.items():
            for speaker in members:
                for path in clips[speaker]:
                    manifest.add_clip(split, speaker, path)
    elif regime == "closed":
        for speaker in speaker_ids:
            assignment = _split_clips(clips[speaker], split_rng)
            for split, paths in assignment.items():
                for path in paths:
                    manifest.add_clip(split, speaker, path)
    else:
        raise DataError(f"unknown regime {regime!r}, expected open or closed")

    for kind in ("white", "pink", "sweep"):
        for j in range(noise_per_class):
            rng = substream(seed, f"corpus-noise-{kind}", j)
            # First clip of each class is deliberately short to exercise
            # the tiling path; the rest cover or exceed the target length.
            duration = clip_seconds * (0.5 if j == 0 else float(rng.uniform(1.0, 1.5)))
            x = synth_noise(kind, duration, sample_rate, rng)
            path = os.path.join(noise_dir, f"{kind}_{j:02d}.wav")
            write_wav(path, Waveform(x, sample_rate))
            manifest.add_noise(kind, path)

    manifest.validate_regime(regime)
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    manifest.save(manifest_path)
    return SynthCorpus(manifest=manifest, manifest_path=manifest_path,
                       voices=dict(zip(speaker_ids, voices)))
