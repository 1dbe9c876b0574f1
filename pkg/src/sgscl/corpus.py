"""Labelled respiratory-cycle corpora.

Two sources produce the same :class:`CorpusRecord` list:

* :func:`synthesize_corpus` writes a synthetic stethoscope-biased corpus in
  which every clip is pink breath noise plus class events (crackle
  transients, wheeze tones) coloured by a per-device filter and noise floor.
* :func:`ingest_icbhi` reads the ICBHI on-disk layout (wav + annotation text
  per recording, plus the official train/test listing).

Records are exchanged through a tab-separated manifest.
"""

from __future__ import annotations

import enum
import logging
import re
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal

from .audio import Waveform

log = logging.getLogger(__name__)

SPLITS = ("train", "test")


class LungLabel(enum.IntEnum):
    NORMAL = 0
    CRACKLE = 1
    WHEEZE = 2
    BOTH = 3

    @property
    def display(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "LungLabel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown lung label {text!r}") from None

    @classmethod
    def from_flags(cls, crackle: int, wheeze: int) -> "LungLabel":
        return cls(int(bool(crackle)) + 2 * int(bool(wheeze)))


class IcbhiDevice(enum.IntEnum):
    MEDITRON = 0
    LITTC2SE = 1
    LITT3200 = 2
    AKGC417L = 3


ICBHI_DEVICE_NAMES = ("Meditron", "LittC2SE", "Litt3200", "AKGC417L")


def device_name(device: int, icbhi: bool = False) -> str:
    return ICBHI_DEVICE_NAMES[device] if icbhi else f"dev{device}"


def parse_device(text: str) -> tuple[int, bool]:
    """Return ``(device id, is_icbhi_name)`` for a manifest device field."""
    text = text.strip()
    for i, name in enumerate(ICBHI_DEVICE_NAMES):
        if text.lower() == name.lower():
            return i, True
    m = re.fullmatch(r"dev(\d+)", text)
    if m:
        return int(m.group(1)), False
    raise ValueError(f"unknown device {text!r}")


@dataclass(frozen=True)
class CorpusRecord:
    """One respiratory cycle.

    ``start``/``end`` (seconds) select a cycle inside ``path``; ``end=None``
    means the whole file.
    """

    path: str
    lung: LungLabel
    device: int
    split: str
    duration: float
    start: float = 0.0
    end: float | None = None
    icbhi: bool = False

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def uri(self) -> str:
        if self.end is None:
            return self.path
        return f"{self.path}#t={self.start:.3f},{self.end:.3f}"

    @property
    def record_id(self) -> str:
        return Path(self.uri).name


# --- wav io ------------------------------------------------------------------


def read_wav(path, start: float = 0.0, end: float | None = None) -> Waveform:
    """Read a PCM wav (8/16/24/32-bit, any channel count; channels are averaged)."""
    with wave.open(str(path), "rb") as fh:
        sr = fh.getframerate()
        width = fh.getsampwidth()
        channels = fh.getnchannels()
        total = fh.getnframes()
        first = int(round(start * sr))
        last = total if end is None else min(total, int(round(end * sr)))
        fh.setpos(min(first, total))
        raw = fh.readframes(max(0, last - first))
    if width == 1:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif width == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise ValueError(f"{path}: unsupported sample width {width}")
    if channels > 1:
        x = x.reshape(-1, channels).mean(axis=1)
    return Waveform(x, sr)


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono; samples are clipped to [-1, 1]."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def load_record_audio(rec: CorpusRecord) -> Waveform:
    return read_wav(rec.path, rec.start, rec.end)


# --- manifest ----------------------------------------------------------------

_FRAGMENT = re.compile(r"^(?P<path>.*)#t=(?P<start>[0-9.]+),(?P<end>[0-9.]+)$")


def write_manifest(records: Iterable[CorpusRecord], path) -> None:
    lines = []
    for r in records:
        lines.append("\t".join([
            r.uri, r.lung.display, device_name(r.device, r.icbhi), r.split, f"{r.duration:.6f}",
        ]))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path) -> list[CorpusRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        uri, lung, dev, split, dur = parts
        device, icbhi = parse_device(dev)
        m = _FRAGMENT.match(uri)
        start, end = (float(m["start"]), float(m["end"])) if m else (0.0, None)
        records.append(CorpusRecord(
            path=m["path"] if m else uri, lung=LungLabel.parse(lung), device=device,
            split=split, duration=float(dur), start=start, end=end, icbhi=icbhi,
        ))
    return records


# --- summaries ---------------------------------------------------------------


def summarize(records: Sequence[CorpusRecord], num_devices: int | None = None) -> dict:
    """Counts by lung label x split and by device x split.

    Returns ``{"lung": {label: {split: n}}, "device": {name: {split: n}},
    "total": {split: n}}``.
    """
    icbhi = any(r.icbhi for r in records)
    if num_devices is None:
        num_devices = 4 if icbhi or not records else max(r.device for r in records) + 1
    lung = {lab.display: {s: 0 for s in SPLITS} for lab in LungLabel}
    dev = {device_name(k, icbhi): {s: 0 for s in SPLITS} for k in range(num_devices)}
    for r in records:
        lung[r.lung.display][r.split] += 1
        dev[device_name(r.device, icbhi)][r.split] += 1
    total = {s: sum(row[s] for row in lung.values()) for s in SPLITS}
    return {"lung": lung, "device": dev, "total": total}


def format_summary(table: dict) -> str:
    rows = ["perspective  label      train   test    sum"]
    for persp in ("lung", "device"):
        for label, c in table[persp].items():
            rows.append(f"{persp:<12} {label:<9} {c['train']:>6} {c['test']:>6} {c['train'] + c['test']:>6}")
    return "\n".join(rows)


# --- ICBHI ingestion -----------------------------------------------------------


def read_split_listing(path) -> dict[str, str]:
    """Parse the official listing: ``<recording stem> <train|test>`` per line."""
    split = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 2 or fields[1] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: malformed split line {line!r}")
        split[Path(fields[0]).stem] = fields[1]
    return split


def parse_annotation(path) -> list[tuple[float, float, LungLabel]]:
    cycles = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        try:
            if len(fields) != 4:
                raise ValueError
            start, end = float(fields[0]), float(fields[1])
            crackle, wheeze = int(fields[2]), int(fields[3])
            if crackle not in (0, 1) or wheeze not in (0, 1) or end < start:
                raise ValueError
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed annotation row {line!r}") from None
        cycles.append((start, end, LungLabel.from_flags(crackle, wheeze)))
    return cycles


def ingest_icbhi(root, split_file) -> list[CorpusRecord]:
    """One record per annotated respiratory cycle, sorted by (filename, start).

    The device comes from the fifth underscore-separated filename field, e.g.
    ``101_1b1_Al_sc_Meditron.wav``. Recordings without an annotation file are
    skipped with a warning.
    """
    root = Path(root)
    listing = read_split_listing(split_file)
    records = []
    for wav in sorted(root.glob("*.wav")):
        ann = wav.with_suffix(".txt")
        if not ann.exists():
            log.warning("no annotation for %s; skipped", wav.name)
            continue
        if wav.stem not in listing:
            log.warning("%s is not in the split listing; skipped", wav.name)
            continue
        fields = wav.stem.split("_")
        if len(fields) < 5:
            raise ValueError(f"{wav.name}: cannot parse device from filename")
        device, _ = parse_device(fields[4])
        for start, end, lung in parse_annotation(ann):
            records.append(CorpusRecord(
                path=str(wav), lung=lung, device=device, split=listing[wav.stem],
                duration=round(end - start, 6), start=start, end=end, icbhi=True,
            ))
    records.sort(key=lambda r: (Path(r.path).name, r.start))
    return records


# --- synthetic corpus ---------------------------------------------------------


@dataclass(frozen=True)
class DeviceColoration:
    """A cascade of RBJ biquads (shelf/peaking) plus a white noise floor."""

    bands: tuple[tuple[str, float, float], ...]  # (kind, freq Hz, gain dB)
    noise_floor_db: float

    def sos(self, sample_rate: int) -> np.ndarray:
        return np.array([_rbj_biquad(kind, f, g, sample_rate) for kind, f, g in self.bands])


def _rbj_biquad(kind: str, freq: float, gain_db: float, fs: int, q: float = 0.707) -> np.ndarray:
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * freq / fs
    cw, sw = np.cos(w0), np.sin(w0)
    alpha = sw / (2.0 * q)
    if kind == "peak":
        b = [1 + alpha * a_lin, -2 * cw, 1 - alpha * a_lin]
        a = [1 + alpha / a_lin, -2 * cw, 1 - alpha / a_lin]
    elif kind in ("lowshelf", "highshelf"):
        sa = 2.0 * np.sqrt(a_lin) * alpha
        s = 1.0 if kind == "lowshelf" else -1.0
        b = [a_lin * ((a_lin + 1) - s * (a_lin - 1) * cw + sa),
             2 * s * a_lin * ((a_lin - 1) - s * (a_lin + 1) * cw),
             a_lin * ((a_lin + 1) - s * (a_lin - 1) * cw - sa)]
        a = [(a_lin + 1) + s * (a_lin - 1) * cw + sa,
             -2 * s * ((a_lin - 1) + s * (a_lin + 1) * cw),
             (a_lin + 1) + s * (a_lin - 1) * cw - sa]
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    b, a = np.array(b) / a[0], np.array(a) / a[0]
    return np.concatenate([b, a])


_BASE_COLORATIONS = (
    # condenser-like: bright
    DeviceColoration((("highshelf", 1500.0, 9.0), ("lowshelf", 200.0, -4.0)), -60.0),
    # dynamic mic: mid emphasis
    DeviceColoration((("peak", 800.0, 8.0), ("highshelf", 3000.0, -9.0)), -56.0),
    # piezo: dark
    DeviceColoration((("lowshelf", 250.0, 8.0), ("highshelf", 1000.0, -12.0)), -58.0),
    # condenser, flatter with a presence bump
    DeviceColoration((("peak", 2500.0, 6.0),), -63.0),
)


def default_colorations(num_devices: int) -> tuple[DeviceColoration, ...]:
    out = []
    for k in range(num_devices):
        base = _BASE_COLORATIONS[k % len(_BASE_COLORATIONS)]
        cycle = k // len(_BASE_COLORATIONS)
        if cycle:
            bands = tuple((kind, f * (1.0 + 0.3 * cycle), g) for kind, f, g in base.bands)
            base = DeviceColoration(bands, base.noise_floor_db - 3.0 * cycle)
        out.append(base)
    return tuple(out)


def biased_counts(num_devices: int, total: int, correlation: float,
                  class_fractions: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
                  absent_devices: Sequence[int] = ()) -> np.ndarray:
    """A (num_devices, 4) count table with a tunable device-class association.

    Class ``c`` has home device ``c % num_devices``. A fraction
    ``1/K' + correlation * (1 - 1/K')`` of its clips goes to the home device
    and the rest is shared equally, where ``K'`` counts the devices that are
    not absent. ``correlation=0`` makes device and class independent.
    Rounding uses largest remainders so every total is exact.
    """
    if not 0.0 <= correlation <= 1.0:
        raise ValueError("correlation must lie in [0, 1]")
    present = [k for k in range(num_devices) if k not in set(absent_devices)]
    if not present:
        raise ValueError("at least one device must be present")
    per_class = _round_exact(np.asarray(class_fractions, dtype=float) * total, total)
    counts = np.zeros((num_devices, 4), dtype=int)
    kp = len(present)
    for c in range(4):
        home = present[c % kp]
        p = np.full(kp, (1.0 - correlation) / kp)
        p[present.index(home)] += correlation
        counts[present, c] = _round_exact(p * per_class[c], per_class[c])
    return counts


def _round_exact(x: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(x).astype(int)
    short = int(total - base.sum())
    order = np.argsort(-(x - base), kind="stable")
    base[order[:short]] += 1
    return base


@dataclass(frozen=True)
class SynthSpec:
    train_counts: np.ndarray  # (num_devices, 4)
    test_counts: np.ndarray
    colorations: tuple[DeviceColoration, ...] = ()
    crackle_rate: float = 12.0  # transients per second
    crackle_ms: float = 5.0
    wheeze_band: tuple[float, float] = (350.0, 450.0)
    duration_range: tuple[float, float] = (2.0, 3.0)
    # device response strength and its per-clip variability
    coloration_scale: float = 0.25
    gain_jitter_db: float = 2.0
    floor_jitter_db: float = 3.0
    level_range_db: float = 12.0
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        tr = np.asarray(self.train_counts, dtype=int)
        te = np.asarray(self.test_counts, dtype=int)
        object.__setattr__(self, "train_counts", tr)
        object.__setattr__(self, "test_counts", te)
        if tr.shape != te.shape or tr.ndim != 2 or tr.shape[1] != 4:
            raise ValueError("count tables must both have shape (num_devices, 4)")
        if tr.shape[0] < 2:
            raise ValueError("synthetic corpora need at least 2 devices")
        if (tr < 0).any() or (te < 0).any():
            raise ValueError("counts must be nonnegative")
        if not self.colorations:
            object.__setattr__(self, "colorations", default_colorations(tr.shape[0]))
        if len(self.colorations) != tr.shape[0]:
            raise ValueError("need one coloration per device")
        if len(set(self.colorations)) != len(self.colorations):
            raise ValueError("device colorations must be distinct")

    @property
    def num_devices(self) -> int:
        return self.train_counts.shape[0]

    @classmethod
    def biased(cls, num_devices: int = 2, n_train: int = 800, n_test: int = 400,
               correlation: float = 0.8, test_correlation: float | None = None,
               absent_test_devices: Sequence[int] = (), **kwargs) -> "SynthSpec":
        """Balanced classes with a device-class association in the train split.

        ``test_correlation`` defaults to ``correlation``.
        """
        if test_correlation is None:
            test_correlation = correlation
        return cls(
            train_counts=biased_counts(num_devices, n_train, correlation),
            test_counts=biased_counts(num_devices, n_test, test_correlation,
                                      absent_devices=absent_test_devices),
            **kwargs,
        )

    @classmethod
    def icbhi_like(cls, **kwargs) -> "SynthSpec":
        """Four devices, the second one absent from the test split."""
        kwargs.setdefault("num_devices", 4)
        kwargs.setdefault("absent_test_devices", (1,))
        return cls.biased(**kwargs)


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    # Kellet's economy pink filter
    b = [0.049922035, -0.095993537, 0.050612699, -0.004408786]
    a = [1.0, -2.494956002, 2.017265875, -0.522189400]
    x = signal.lfilter(b, a, rng.standard_normal(n + 2000))[2000:]
    return x / (np.std(x) + 1e-12)


def synth_clip(lung: LungLabel, device: int, spec: SynthSpec, rng: np.random.Generator) -> Waveform:
    """One synthetic respiratory cycle as heard through ``device``."""
    sr = spec.sample_rate
    dur = rng.uniform(*spec.duration_range)
    n = int(round(dur * sr))
    t = np.arange(n) / sr
    breath = 0.25 + 0.75 * np.sin(np.pi * t / dur) ** 2
    x = 0.05 * breath * _pink_noise(n, rng)

    if lung in (LungLabel.CRACKLE, LungLabel.BOTH):
        n_events = rng.poisson(spec.crackle_rate * dur)
        width = int(spec.crackle_ms * 1e-3 * sr)
        decay = np.exp(-np.arange(width) / (width / 5.0))
        for onset in rng.integers(0, max(1, n - width), size=n_events):
            burst = rng.standard_normal(width) * decay * rng.uniform(0.15, 0.35)
            x[onset:onset + width] += burst[: n - onset]

    if lung in (LungLabel.WHEEZE, LungLabel.BOTH):
        lo, hi = spec.wheeze_band
        f0 = rng.uniform(lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo))
        vibrato = 0.02 * f0 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t)
        phase = 2 * np.pi * np.cumsum(f0 + vibrato) / sr
        seg_start = rng.uniform(0.0, 0.3) * dur
        seg_len = rng.uniform(0.5, 0.7) * dur
        env = np.clip((t - seg_start) / seg_len, 0.0, 1.0)
        env = np.where((t >= seg_start) & (t <= seg_start + seg_len), np.sin(np.pi * env) ** 0.5, 0.0)
        x += 0.08 * env * np.sin(phase + rng.uniform(0, 2 * np.pi))

    col = spec.colorations[device]
    bands = tuple((kind, f, g * spec.coloration_scale + spec.gain_jitter_db * rng.standard_normal())
                  for kind, f, g in col.bands)
    y = signal.sosfilt(DeviceColoration(bands, col.noise_floor_db).sos(sr), x)
    y *= 10.0 ** (rng.uniform(-0.5, 0.5) * spec.level_range_db / 20.0)
    floor_db = col.noise_floor_db + spec.floor_jitter_db * rng.standard_normal()
    y += 10.0 ** (floor_db / 20.0) * rng.standard_normal(n)
    peak = np.max(np.abs(y))
    if peak > 0.95:
        y *= 0.95 / peak
    return Waveform(y, sr)


def synthesize_corpus(spec: SynthSpec, out_dir) -> list[CorpusRecord]:
    """Write every clip of ``spec`` as a 16-bit wav and return the records.

    Each clip draws from its own random stream, derived from ``spec.seed`` and
    the clip's position, so the output is reproducible clip by clip.
    """
    total = int(spec.train_counts.sum() + spec.test_counts.sum())
    if total == 0:
        raise ValueError("synthetic spec requests zero clips")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    streams = iter(np.random.SeedSequence(spec.seed).spawn(total))
    records = []
    for split, counts in (("train", spec.train_counts), ("test", spec.test_counts)):
        idx = 0
        for device in range(spec.num_devices):
            for lung in LungLabel:
                for _ in range(int(counts[device, lung])):
                    rng = np.random.default_rng(next(streams))
                    w = synth_clip(lung, device, spec, rng)
                    path = out / f"{split}_{idx:05d}_dev{device}_{lung.display.lower()}.wav"
                    write_wav(path, w)
                    records.append(CorpusRecord(str(path), lung, device, split, round(w.duration, 6)))
                    idx += 1
    return records
