"""WAV input, log-mel features, and a labelled synthetic corpus.

Framing: 25 ms Hann window, 10 ms hop, FFT size the next power of two at or
above the window (512 at 16 kHz), no centre padding, so a signal of ``n``
samples gives ``1 + (n - win) // hop`` frames.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_RATES = (8000, 16000)
LOG_FLOOR = 1e-6


class WavFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate not in SAMPLE_RATES:
            raise ValueError(f"sample_rate must be one of {SAMPLE_RATES}, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class LogMelSpectrogram:
    frames: np.ndarray          # (T, n_mels)
    frame_hop_ms: float = 10.0
    frame_len_ms: float = 25.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SyntheticUtterance:
    utterance_id: str
    waveform: Waveform
    frame_labels: np.ndarray    # one hidden-state id per log-mel frame
    features: LogMelSpectrogram | None = field(default=None, repr=False)

    def logmel(self) -> LogMelSpectrogram:
        if self.features is None:
            self.features = compute_logmel(self.waveform)
        return self.features


# ------------------------------------------------------------------------ I/O

def load_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV, scaling samples by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            comp = wf.getcomptype()
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: {exc}") from None
    except EOFError:
        raise WavFormatError(f"{path}: truncated header") from None
    if comp != "NONE":
        raise WavFormatError(f"{path}: compression type {comp!r}, expected uncompressed PCM")
    if channels != 1:
        raise WavFormatError(f"{path}: channels = {channels}, expected 1 (mono)")
    if width != 2:
        raise WavFormatError(f"{path}: sample width = {width} bytes, expected 2 (16-bit PCM)")
    if rate not in SAMPLE_RATES:
        raise WavFormatError(f"{path}: sample rate = {rate}, expected one of {SAMPLE_RATES}")
    if len(raw) != 2 * n:
        raise WavFormatError(f"{path}: data chunk holds {len(raw) // 2} frames, header nframes = {n} (truncated)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


# ------------------------------------------------------------------- log-mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _triangle_area(f, lo, c, hi):
    """Integral from -inf to f of a unit-height triangle on (lo, c, hi)."""
    f = np.clip(f, lo, hi)
    left = (f - lo) ** 2 / (2 * (c - lo))
    right = (c - lo) / 2 + (hi - c) / 2 - (hi - f) ** 2 / (2 * (hi - c))
    return np.where(f <= c, left, right)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters from 0 Hz to Nyquist.

    Each weight is the triangle's mean height over the frequency interval a
    bin represents (bin centre +- half a bin), not its height at the centre.
    Narrow low-frequency triangles therefore never vanish, and every bin
    below Nyquist, DC included, receives weight from some filter.
    """
    nyq = sample_rate / 2
    n_bins = n_fft // 2 + 1
    df = sample_rate / n_fft
    centres = np.arange(n_bins) * df
    a, b = centres - df / 2, centres + df / 2
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(nyq), n_mels + 2))
    fb = np.empty((n_mels, n_bins))
    for m in range(n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        fb[m] = (_triangle_area(b, lo, c, hi) - _triangle_area(a, lo, c, hi)) / df
    return fb


def frame_params(sample_rate: int) -> tuple[int, int, int]:
    win = int(round(0.025 * sample_rate))
    hop = int(round(0.010 * sample_rate))
    n_fft = 1 << (win - 1).bit_length()
    return win, hop, n_fft


def compute_logmel(w: Waveform, n_mels: int = 80) -> LogMelSpectrogram:
    win, hop, n_fft = frame_params(w.sample_rate)
    x = w.samples
    if len(x) < win:
        raise ValueError(f"waveform has {len(x)} samples, need at least one {win}-sample window")
    n_frames = 1 + (len(x) - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    spec = np.abs(np.fft.rfft(frames * np.hanning(win), n=n_fft, axis=1)) ** 2
    mel = spec @ mel_filterbank(n_mels, n_fft, w.sample_rate).T
    return LogMelSpectrogram(np.log(mel + LOG_FLOOR))


# ----------------------------------------------------------- synthetic corpus

MIN_DWELL = 5


def state_formants(n_states: int) -> np.ndarray:
    """(n_states, 2) formant pairs in Hz, distinct per state, independent of seed."""
    rng = np.random.default_rng(12345)
    f1 = np.linspace(300.0, 1000.0, n_states)
    f2 = np.linspace(1100.0, 3200.0, n_states)
    return np.stack([f1, rng.permutation(f2)], axis=1)


def successor_table(n_states: int) -> np.ndarray:
    """Preferred next state for each state: one fixed cycle through all states."""
    order = np.random.default_rng(54321).permutation(n_states)
    nxt = np.empty(n_states, dtype=np.int64)
    nxt[order] = np.roll(order, -1)
    return nxt


def _state_sequence(n_frames: int, n_states: int, switch_prob: float, successor_prob: float,
                    rng: np.random.Generator) -> np.ndarray:
    labels = np.empty(n_frames, dtype=np.int64)
    nxt = successor_table(n_states)
    state = int(rng.integers(n_states))
    pos = 0
    while pos < n_frames:
        dwell = MIN_DWELL + int(rng.geometric(switch_prob)) - 1
        labels[pos:pos + dwell] = state
        pos += dwell
        if rng.random() < successor_prob:
            state = int(nxt[state])
        else:
            state = (state + 1 + int(rng.integers(n_states - 1))) % n_states
    return labels


def synth_utterance(index: int, seed: int, duration_range_s: tuple[float, float], n_states: int,
                    sample_rate: int = 16000, snr_db: float = 20.0,
                    switch_prob: float = 0.15, successor_prob: float = 0.8,
                    speaker_jitter: float = 0.03) -> SyntheticUtterance:
    """One Markov-chain utterance; deterministic given ``seed + index``.

    A state lasts ``MIN_DWELL`` frames plus a geometric number of extra frames,
    then moves to its preferred successor with probability ``successor_prob``
    and otherwise to a uniformly chosen different state.  The formant warp
    ``speaker_jitter`` stays below half the spacing between neighbouring states.
    """
    rng = np.random.default_rng(seed + index)
    win, hop, _ = frame_params(sample_rate)
    lo, hi = duration_range_s
    n = int(round(rng.uniform(lo, hi) * sample_rate))
    n_frames = 1 + (n - win) // hop
    labels = _state_sequence(n_frames, n_states, switch_prob, successor_prob, rng)

    # Per-sample state: the label of the hop-segment the sample starts in.
    seg = np.minimum(np.arange(n) // hop, n_frames - 1)
    sample_state = labels[seg]
    warp = 1.0 + speaker_jitter * rng.uniform(-1.0, 1.0)
    formants = state_formants(n_states) * warp
    amps = rng.uniform(0.6, 1.0, size=(n_states, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(n_states, 2))
    t = np.arange(n) / sample_rate
    f = formants[sample_state]
    a = amps[sample_state]
    ph = phases[sample_state]
    clean = (a * np.sin(2 * np.pi * f * t[:, None] + ph)).sum(axis=1)
    rms = np.sqrt(np.mean(clean ** 2))
    noise = rng.standard_normal(n) * rms / (10 ** (snr_db / 20))
    x = clean + noise
    x = 0.9 * x / np.max(np.abs(x))
    return SyntheticUtterance(f"utt{index:05d}", Waveform(x, sample_rate), labels)


def generate_synthetic_corpus(n_utts: int, duration_range_s: tuple[float, float], n_states: int,
                              seed: int, **kwargs) -> list[SyntheticUtterance]:
    """Utterance ``i`` is generated from ``seed + i``, so any subset can be built independently."""
    lo, hi = duration_range_s
    if n_states < 2:
        raise ValueError(f"n_states must be >= 2, got {n_states}")
    if not (lo <= hi) or lo < 0.3 or hi > 5.0:
        raise ValueError(f"duration range {duration_range_s} must be non-empty and within [0.3, 5] s")
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    return [synth_utterance(i, seed, (lo, hi), n_states, **kwargs) for i in range(n_utts)]


def write_corpus(utts: list[SyntheticUtterance], out_dir) -> Path:
    """Write wavs, label files and ``manifest.tsv`` (id, wav path, label path)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utts:
        wav_path = out_dir / f"{u.utterance_id}.wav"
        lab_path = out_dir / f"{u.utterance_id}.labels"
        write_wav(wav_path, u.waveform)
        lab_path.write_text("".join(f"{int(v)}\n" for v in u.frame_labels))
        lines.append(f"{u.utterance_id}\t{wav_path.name}\t{lab_path.name}\n")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("".join(lines))
    return manifest


def read_corpus(manifest) -> list[SyntheticUtterance]:
    manifest = Path(manifest)
    utts = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        uid, wav_rel, lab_rel = line.split("\t")
        w = load_wav(manifest.parent / wav_rel)
        labels = np.array([int(v) for v in (manifest.parent / lab_rel).read_text().split()], dtype=np.int64)
        utts.append(SyntheticUtterance(uid, w, labels))
    return utts
