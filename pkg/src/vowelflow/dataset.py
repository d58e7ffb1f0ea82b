"""Fixed-size spectrogram corpus construction.

A corpus directory holds three files:

* ``corpus.fstn``    - concatenated FSTN tensor records, one per segment;
* ``manifest.jsonl`` - one JSON object per record with keys
  utt, spk, gender, vowel, valid_frames, offset, noise_snr_db;
* ``corpus.json``    - normalization stats, config echo and the train split.

Records are ordered deterministically; a noisy twin (when noise
augmentation is configured) immediately follows its clean sibling and
shares its utterance id.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng, read_tensor_from, write_tensor_to
from .signal import (
    FORMANTS,
    MAG_FLOOR,
    StftConfig,
    VOWELS,
    Waveform,
    add_white_noise,
    log_normalize,
    read_wav,
    stft,
    synth_vowel,
    write_wav,
)

FULL_FRAMES = 288  # time frames after padding, and frequency bands after appending zeros
FREQ_ZERO_BANDS = 31  # 257 real bins + 31 zero bands = 288

GENDERS = ("M", "F", "unknown")

# synthetic-speaker draw ranges, per gender
_F0_RANGE = {"M": (85.0, 180.0), "F": (160.0, 300.0)}
_SHIFT_RANGE = {"M": (-0.08, 0.04), "F": (0.10, 0.22)}
_DURATION_RANGE = (0.15, 0.30)


class AlignmentParseError(ValueError):
    """Malformed phone-alignment line; carries the 1-based line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass
class SegmentRecord:
    utterance_id: str
    speaker_id: str
    gender: str
    vowel: str
    start_sample: int
    end_sample: int
    noise_snr_db: float | None = None

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        if self.vowel not in FORMANTS:
            raise ValueError(f"vowel must be one of {VOWELS}, got {self.vowel!r}")
        if not self.start_sample < self.end_sample:
            raise ValueError(
                f"empty segment [{self.start_sample}, {self.end_sample}) in {self.utterance_id}"
            )


@dataclass
class Spectrogram:
    """Normalized log-magnitude image, (1, S, S) with rows = time frames."""

    pixels: np.ndarray
    record: SegmentRecord
    valid_frames: int  # full-resolution frame count, <= FULL_FRAMES


@dataclass
class DatasetConfig:
    image_size: int = 32  # desk scale; 288 for full runs
    stft: StftConfig = field(default_factory=StftConfig)
    noise_snr_db: float | None = None  # noisy twin per record when set
    train_fraction: float = 0.9
    write_wavs: bool = False

    def __post_init__(self):
        if FULL_FRAMES % self.image_size != 0:
            raise ValueError(
                f"image_size must divide {FULL_FRAMES}, got {self.image_size}"
            )


@dataclass
class SyntheticSpec:
    """Desk-scale corpus: vowels x speakers x draws synthetic segments."""

    n_speakers: int = 4
    draws_per_vowel: int = 10
    vowels: tuple[str, ...] = VOWELS


@dataclass
class ManifestEntry:
    record: SegmentRecord
    valid_frames: int
    offset: int


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    stats: tuple[float, float]  # (mean, std) of ln(mag + 1e-5) over unpadded pixels
    config: dict
    train_utterances: list[str]

    def __post_init__(self):
        offsets = [e.offset for e in self.entries]
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("manifest offsets must be strictly increasing")
        mean, std = self.stats
        if not (math.isfinite(mean) and math.isfinite(std) and std > 0):
            raise ValueError(f"degenerate normalization stats {self.stats}")

    def train_indices(self) -> list[int]:
        train = set(self.train_utterances)
        return [i for i, e in enumerate(self.entries) if e.record.utterance_id in train]

    def eval_indices(self) -> list[int]:
        train = set(self.train_utterances)
        return [i for i, e in enumerate(self.entries) if e.record.utterance_id not in train]

    def select(self, vowel=None, gender=None, speaker=None, noisy=None) -> list[int]:
        out = []
        for i, e in enumerate(self.entries):
            r = e.record
            if vowel is not None and r.vowel != vowel:
                continue
            if gender is not None and r.gender != gender:
                continue
            if speaker is not None and r.speaker_id != speaker:
                continue
            if noisy is not None and (r.noise_snr_db is not None) != noisy:
                continue
            out.append(i)
        return out

    def clean_noisy_pairs(self) -> list[tuple[int, int]]:
        """Indices of (clean, noisy-twin) records paired by utterance id."""
        clean = {}
        pairs = []
        for i, e in enumerate(self.entries):
            if e.record.noise_snr_db is None:
                clean[e.record.utterance_id] = i
        for i, e in enumerate(self.entries):
            if e.record.noise_snr_db is not None and e.record.utterance_id in clean:
                pairs.append((clean[e.record.utterance_id], i))
        return pairs


# ---------------------------------------------------------------------------
# alignment parsing


def parse_phone_alignment(text: str) -> list[tuple[int, int, str]]:
    """Parse "begin end label" lines with integer sample indices."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise AlignmentParseError(f"expected 'begin end label', got {line!r}", lineno)
        try:
            begin, end = int(parts[0]), int(parts[1])
        except ValueError:
            raise AlignmentParseError(f"non-integer sample index in {line!r}", lineno) from None
        if begin >= end:
            raise AlignmentParseError(f"begin {begin} >= end {end}", lineno)
        out.append((begin, end, parts[2]))
    return out


def extract_segments(
    alignment: list[tuple[int, int, str]],
    vowel_set,
    utterance_id: str = "",
    speaker_id: str = "",
    gender: str = "unknown",
) -> list[SegmentRecord]:
    """Keep only alignment entries whose label is in `vowel_set`."""
    wanted = set(vowel_set)
    return [
        SegmentRecord(
            utterance_id=utterance_id,
            speaker_id=speaker_id,
            gender=gender,
            vowel=label,
            start_sample=begin,
            end_sample=end,
        )
        for begin, end, label in alignment
        if label in wanted
    ]


# ---------------------------------------------------------------------------
# spectrogram shaping


def padding_value(stats: tuple[float, float]) -> float:
    """Image of magnitude zero under log_normalize: the padding constant."""
    return float(log_normalize(np.zeros(1), stats)[0])


def _pool(image: np.ndarray, size: int) -> np.ndarray:
    factor = image.shape[0] // size
    return image.reshape(size, factor, size, factor).mean(axis=(1, 3))


def segment_to_spectrogram(
    w: Waveform,
    rec: SegmentRecord,
    stft_config: StftConfig,
    stats: tuple[float, float],
    image_size: int = FULL_FRAMES,
) -> Spectrogram | None:
    """Build the fixed-size normalized image for one segment.

    Pipeline: STFT magnitude, append 31 zero frequency bands, normalize,
    zero-pad the time axis to 288 frames (padding rows take the
    normalized-zero constant), then average-pool to `image_size` when a
    desk-scale size is configured.  Returns None (discard) when the
    segment spans more than 288 frames.
    """
    if rec.start_sample < 0 or rec.end_sample > len(w.samples):
        raise ValueError(
            f"segment [{rec.start_sample}, {rec.end_sample}) outside waveform "
            f"of {len(w.samples)} samples"
        )
    seg = Waveform(w.samples[rec.start_sample:rec.end_sample], w.sample_rate)
    spec = stft(seg, stft_config.window_len, stft_config.hop, stft_config.fft_size)
    mag = spec.magnitude
    t = mag.shape[0]
    if t > FULL_FRAMES:
        return None
    mag = np.concatenate([mag, np.zeros((t, FREQ_ZERO_BANDS))], axis=1)
    image = np.full((FULL_FRAMES, mag.shape[1]), padding_value(stats))
    image[:t] = log_normalize(mag, stats)
    if image.shape != (FULL_FRAMES, FULL_FRAMES):
        raise ValueError(f"expected {FULL_FRAMES}x{FULL_FRAMES} image, got {image.shape}")
    if image_size != FULL_FRAMES:
        image = _pool(image, image_size)
    return Spectrogram(pixels=image[None], record=rec, valid_frames=t)


def add_jitter(pixels: np.ndarray, rng: Rng, delta: float) -> np.ndarray:
    """Pixels plus i.i.d. uniform(-delta, +delta) dequantization noise."""
    if delta < 0:
        raise ValueError(f"jitter delta must be nonnegative, got {delta}")
    if delta == 0:
        return np.array(pixels, copy=True)
    return pixels + rng.uniform(-delta, delta, pixels.shape)


# ---------------------------------------------------------------------------
# corpus sources


@dataclass
class _RawSegment:
    record: SegmentRecord
    waveform: Waveform  # full source waveform; record bounds index into it


def _synthetic_segments(spec: SyntheticSpec, rng: Rng) -> list[_RawSegment]:
    speaker_rng = rng.spawn(0)
    draw_rng = rng.spawn(1)
    speakers = []
    for i in range(spec.n_speakers):
        gender = "M" if i % 2 == 0 else "F"
        shift = speaker_rng.uniform(*_SHIFT_RANGE[gender])
        speakers.append((f"spk{i:02d}", gender, shift))

    out = []
    for spk, gender, shift in speakers:
        for vowel in spec.vowels:
            for draw in range(spec.draws_per_vowel):
                f0 = draw_rng.uniform(*_F0_RANGE[gender])
                duration = draw_rng.uniform(*_DURATION_RANGE)
                w = synth_vowel(draw_rng, vowel, f0, duration, shift)
                rec = SegmentRecord(
                    utterance_id=f"{spk}_{vowel}_{draw:03d}",
                    speaker_id=spk,
                    gender=gender,
                    vowel=vowel,
                    start_sample=0,
                    end_sample=len(w.samples),
                )
                out.append(_RawSegment(rec, w))
    return out


def _real_corpus_segments(root: Path, vowels) -> list[_RawSegment]:
    """Walk a "<dialect>/<G><ID>/<utt>.phn" tree with sibling WAV files."""
    out = []
    for phn in sorted(root.rglob("*.phn")):
        wav_path = phn.with_suffix(".wav")
        if not wav_path.exists():
            continue
        speaker_dir = phn.parent.name
        dialect = phn.parent.parent.name
        gender = speaker_dir[:1].upper()
        if gender not in ("M", "F"):
            gender = "unknown"
        utt = f"{dialect}_{speaker_dir}_{phn.stem}"
        alignment = parse_phone_alignment(phn.read_text())
        records = extract_segments(
            alignment, vowels, utterance_id=utt, speaker_id=speaker_dir, gender=gender
        )
        if not records:
            continue
        w = read_wav(wav_path)
        out.extend(_RawSegment(rec, w) for rec in records)
    return out


# ---------------------------------------------------------------------------
# corpus builder


def build_corpus(
    source: SyntheticSpec | str | Path,
    config: DatasetConfig,
    rng: Rng,
    out_dir: str | Path,
) -> Manifest:
    """Build the spectrogram archive and manifest under `out_dir`.

    Deterministic given (source, config, rng seed).  Normalization
    stats are computed over the unpadded pixels (valid frames, real
    frequency bins) of the training split.  When noise augmentation is
    configured every record gets a noisy twin at the configured SNR.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if isinstance(source, SyntheticSpec):
        raw = _synthetic_segments(source, rng)
        source_echo = {
            "kind": "synthetic",
            "n_speakers": source.n_speakers,
            "draws_per_vowel": source.draws_per_vowel,
            "vowels": list(source.vowels),
        }
    else:
        raw = _real_corpus_segments(Path(source), VOWELS)
        source_echo = {"kind": "real", "root": str(source)}
    if not raw:
        raise ValueError("corpus source produced no vowel segments")

    noise_rng = rng.spawn(2)
    split_rng = rng.spawn(3)

    # materialize segment waveforms, attach noisy twins, drop unusable segments
    segments: list[tuple[SegmentRecord, Waveform, np.ndarray]] = []  # (rec, wave, mag)
    n_discarded = 0
    cfg = config.stft
    for item in raw:
        rec = item.record
        sliced = Waveform(
            item.waveform.samples[rec.start_sample:rec.end_sample],
            item.waveform.sample_rate,
        )
        if len(sliced.samples) < cfg.window_len:
            n_discarded += 1  # shorter than one analysis window
            continue
        variants = [(rec, sliced)]
        if config.noise_snr_db is not None:
            twin = SegmentRecord(
                utterance_id=rec.utterance_id,
                speaker_id=rec.speaker_id,
                gender=rec.gender,
                vowel=rec.vowel,
                start_sample=rec.start_sample,
                end_sample=rec.end_sample,
                noise_snr_db=config.noise_snr_db,
            )
            variants.append((twin, add_white_noise(sliced, noise_rng, config.noise_snr_db)))
        for vrec, vwave in variants:
            mag = stft(vwave, cfg.window_len, cfg.hop, cfg.fft_size).magnitude
            if mag.shape[0] > FULL_FRAMES:
                n_discarded += 1
                continue
            segments.append((vrec, vwave, mag))

    if not segments:
        raise ValueError("all segments were discarded")

    # 90/10 split by utterance
    utterances = sorted({rec.utterance_id for rec, _, _ in segments})
    order = split_rng.permutation(len(utterances))
    n_train = max(1, int(round(config.train_fraction * len(utterances))))
    train_utts = sorted(utterances[i] for i in order[:n_train])
    train_set = set(train_utts)

    # normalization stats over unpadded pixels of the training split
    total, total_sq, count = 0.0, 0.0, 0
    for rec, _, mag in segments:
        if rec.utterance_id in train_set:
            logs = np.log(mag + MAG_FLOOR)
            total += float(logs.sum())
            total_sq += float((logs**2).sum())
            count += logs.size
    if count == 0:
        raise ValueError("training split is empty")
    mean = total / count
    var = max(total_sq / count - mean * mean, 1e-12)
    stats = (mean, math.sqrt(var))

    config_echo = {
        "source": source_echo,
        "image_size": config.image_size,
        "stft": {
            "window_len": cfg.window_len,
            "hop": cfg.hop,
            "fft_size": cfg.fft_size,
        },
        "noise_snr_db": config.noise_snr_db,
        "train_fraction": config.train_fraction,
        "seed": rng.seed,
    }

    entries = []
    wav_dir = out_dir / "wavs"
    if config.write_wavs:
        wav_dir.mkdir(exist_ok=True)
    with open(out_dir / "corpus.fstn", "wb") as archive:
        for rec, wave_seg, _ in segments:
            # record bounds are relative to the already-sliced waveform here
            whole = SegmentRecord(
                rec.utterance_id, rec.speaker_id, rec.gender, rec.vowel,
                0, len(wave_seg.samples), rec.noise_snr_db,
            )
            spec = segment_to_spectrogram(wave_seg, whole, cfg, stats, config.image_size)
            assert spec is not None  # long segments were dropped above
            offset = archive.tell()
            write_tensor_to(archive, spec.pixels)
            entries.append(ManifestEntry(record=rec, valid_frames=spec.valid_frames, offset=offset))
            if config.write_wavs:
                suffix = "noisy" if rec.noise_snr_db is not None else "clean"
                write_wav(wav_dir / f"{rec.utterance_id}.{suffix}.wav", wave_seg)

    manifest = Manifest(
        entries=entries, stats=stats, config=config_echo, train_utterances=train_utts
    )
    save_manifest(manifest, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# persistence


def save_manifest(manifest: Manifest, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "manifest.jsonl", "w") as fp:
        for e in manifest.entries:
            fp.write(json.dumps({
                "utt": e.record.utterance_id,
                "spk": e.record.speaker_id,
                "gender": e.record.gender,
                "vowel": e.record.vowel,
                "valid_frames": e.valid_frames,
                "offset": e.offset,
                "noise_snr_db": e.record.noise_snr_db,
            }) + "\n")
    header = {
        "format": "vowelflow-corpus-v1",
        "stats": {"mean": manifest.stats[0], "std": manifest.stats[1]},
        "config": manifest.config,
        "train_utterances": manifest.train_utterances,
    }
    with open(out_dir / "corpus.json", "w") as fp:
        json.dump(header, fp, indent=1)
        fp.write("\n")


def load_manifest(corpus_dir: str | Path) -> Manifest:
    corpus_dir = Path(corpus_dir)
    header = json.loads((corpus_dir / "corpus.json").read_text())
    entries = []
    for line in (corpus_dir / "manifest.jsonl").read_text().splitlines():
        row = json.loads(line)
        start, end = 0, 1  # archive stores pixels; original bounds are not replayed
        entries.append(ManifestEntry(
            record=SegmentRecord(
                utterance_id=row["utt"],
                speaker_id=row["spk"],
                gender=row["gender"],
                vowel=row["vowel"],
                start_sample=start,
                end_sample=end,
                noise_snr_db=row["noise_snr_db"],
            ),
            valid_frames=row["valid_frames"],
            offset=row["offset"],
        ))
    return Manifest(
        entries=entries,
        stats=(header["stats"]["mean"], header["stats"]["std"]),
        config=header["config"],
        train_utterances=list(header["train_utterances"]),
    )


class CorpusReader:
    """Random access to archived spectrograms via manifest offsets."""

    def __init__(self, corpus_dir: str | Path):
        self.dir = Path(corpus_dir)
        self.manifest = load_manifest(self.dir)
        self._archive = open(self.dir / "corpus.fstn", "rb")

    def close(self):
        self._archive.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def pixels(self, index: int) -> np.ndarray:
        self._archive.seek(self.manifest.entries[index].offset)
        return read_tensor_from(self._archive)

    def load(self, indices=None) -> np.ndarray:
        """Stack of (N, 1, S, S) pixel tensors for the given indices."""
        if indices is None:
            indices = range(len(self.manifest.entries))
        return np.stack([self.pixels(i) for i in indices])

    def wav_path(self, index: int) -> Path:
        e = self.manifest.entries[index]
        suffix = "noisy" if e.record.noise_snr_db is not None else "clean"
        return self.dir / "wavs" / f"{e.record.utterance_id}.{suffix}.wav"
