"""Synthetic voices, mixture construction, WAV and manifest I/O.

The toy corpus stands in for real recorded speech: each speaker is a
harmonic-plus-noise generator whose parameters come from disjoint cells,
so speakers are tellable apart yet share enough broadband energy that
ideal-mask oracles don't trivialize the task.
"""

import json
import os
import struct
import numpy as np
from dataclasses import dataclass, field

from .errors import DataError, FormatError, InputError

SAMPLE_RATE = 8000

# Parameter cells. Speakers cycle through four fundamental-frequency cells
# so that every cell is represented in every hold-out split; speakers that
# share a cell always differ in spectral tilt.
_F0_CELLS = [(95, 115), (170, 190), (265, 285), (385, 405)]
_AM_RATES = [2.0, 3.1, 4.3, 5.7]
_TILTS = [0.55, 0.75, 0.95]  # harmonic amplitude decay per harmonic index


@dataclass(frozen=True)
class ToySpeaker:
    id: str
    f0_lo: float
    f0_hi: float
    tilt: float       # k-th harmonic weight = tilt ** (k - 1)
    am_rate: float    # amplitude-modulation rate, Hz
    noise_floor: float


def make_speakers(n: int, seed: int, noise_floor: float = 0.10
                  ) -> list[ToySpeaker]:
    """n deterministic, pairwise-distinct speakers.

    Fundamental-frequency cells repeat every len(_F0_CELLS) speakers;
    tilt repeats every len(_TILTS), so any two speakers differ in at
    least one of the two (cell count and tilt count are coprime).
    """
    limit = len(_F0_CELLS) * len(_TILTS)
    if n > limit:
        raise DataError(f"make_speakers: at most {limit} distinct speakers")
    rng = np.random.default_rng([seed, 0x5eed])
    order = rng.permutation(len(_F0_CELLS))
    speakers = []
    for i in range(n):
        lo, hi = _F0_CELLS[order[i % len(_F0_CELLS)]]
        speakers.append(ToySpeaker(
            id=f"spk{i:02d}", f0_lo=float(lo), f0_hi=float(hi),
            tilt=_TILTS[i % len(_TILTS)], am_rate=_AM_RATES[i % len(_AM_RATES)],
            noise_floor=noise_floor))
    return speakers


def synth_utterance(speaker: ToySpeaker, duration_s: float, seed
                    ) -> np.ndarray:
    """One harmonic-plus-noise utterance, peak-normalized to 0.5."""
    if duration_s < 0.5:
        raise InputError("synth_utterance: duration must be at least 0.5 s")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(speaker.f0_lo, speaker.f0_hi)
    # slow vibrato keeps harmonics off exact FFT bins
    vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(1.5, 3.0) * t
                              + rng.uniform(0, 2 * np.pi))
    phase_inc = 2 * np.pi * f0 * vib / SAMPLE_RATE
    base_phase = np.cumsum(phase_inc)
    sig = np.zeros(n)
    n_harm = max(2, int((SAMPLE_RATE / 2 * 0.85) // f0))
    for k in range(1, min(n_harm, 24) + 1):
        amp = speaker.tilt ** (k - 1)
        sig += amp * np.sin(k * base_phase + rng.uniform(0, 2 * np.pi))
    am = 1.0 + 0.5 * np.sin(2 * np.pi * speaker.am_rate * t
                            + rng.uniform(0, 2 * np.pi))
    sig *= am
    sig += speaker.noise_floor * np.max(np.abs(sig)) * rng.standard_normal(n)
    peak = np.max(np.abs(sig))
    if peak > 0:
        sig *= 0.5 / peak
    return sig.astype(np.float64)


@dataclass
class MixtureSample:
    x: np.ndarray
    sources: list          # raw source waveforms s_i
    gains: list            # scale factors c_i; x == sum(c_i * s_i)
    speaker_ids: list
    sample_rate: int = SAMPLE_RATE

    def scaled_sources(self) -> list:
        """Sources as they appear inside the mixture (c_i * s_i)."""
        return [g * s for g, s in zip(self.gains, self.sources)]


def make_mixture(sources, speaker_ids, seed, snr_range=(0.0, 5.0),
                 forced_snrs=None) -> MixtureSample:
    """Sum sources with the first at gain 1 and each other source at a
    random SNR (dB, relative to the first) drawn from snr_range."""
    c = len(sources)
    if c < 2:
        raise InputError("make_mixture: need at least 2 sources")
    if len(set(speaker_ids)) != c:
        raise InputError("make_mixture: speaker ids must be distinct")
    lengths = {len(s) for s in sources}
    if len(lengths) != 1:
        raise InputError(f"make_mixture: unequal source lengths {lengths}")
    powers = [float(np.mean(np.square(s))) for s in sources]
    if any(p == 0.0 for p in powers):
        raise DataError("make_mixture: zero-energy source")
    rng = np.random.default_rng(seed)
    gains = [1.0]
    for i in range(1, c):
        snr = (forced_snrs[i - 1] if forced_snrs is not None
               else rng.uniform(*snr_range))
        gains.append(float(np.sqrt(powers[0] / (powers[i] * 10 ** (snr / 10)))))
    x = np.zeros(len(sources[0]))
    for g, s in zip(gains, sources):
        x += g * s
    return MixtureSample(x=x, sources=[np.asarray(s) for s in sources],
                         gains=gains, speaker_ids=list(speaker_ids))


# --- WAV I/O (RIFF PCM16 mono), parsed by hand so errors carry offsets ---

def wav_write(path, x: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    x = np.asarray(x, dtype=np.float64)
    pcm = np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    hdr = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16,
        b"data", len(data))
    with open(path, "wb") as f:
        f.write(hdr + data)


def wav_read(path):
    """Returns (waveform in [-1, 1), sample_rate). PCM16 mono only."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError(f"{path}: not a RIFF file (only {len(blob)} "
                          "bytes, offset 0)")
    if blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: bad RIFF/WAVE magic at offset 0")
    off = 12
    fmt = None
    data = None
    while off + 8 <= len(blob):
        cid = blob[off:off + 4]
        (size,) = struct.unpack_from("<I", blob, off + 4)
        body = blob[off + 8:off + 8 + size]
        if len(body) < size:
            raise FormatError(
                f"{path}: chunk {cid!r} truncated at offset {off}")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(
                    f"{path}: fmt chunk too short at offset {off}")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = (off + 8, body)
        off += 8 + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: no fmt chunk before offset {off}")
    if data is None:
        raise FormatError(f"{path}: no data chunk before offset {off}")
    audio_fmt, channels, rate, _, _, bits = fmt
    if audio_fmt != 1 or bits != 16:
        raise FormatError(
            f"{path}: unsupported encoding (format {audio_fmt}, "
            f"{bits}-bit) in fmt chunk")
    if channels != 1:
        raise FormatError(f"{path}: {channels} channels, expected mono")
    data_off, body = data
    if len(body) % 2:
        raise FormatError(
            f"{path}: odd data chunk length at offset {data_off}")
    pcm = np.frombuffer(body, dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


# --- Corpus build: speaker-disjoint splits + JSONL manifests ---

SPLITS = ("train", "valid", "test")


def _split_speakers(speakers, fracs=(0.5, 0.25, 0.25), min_per_split=2,
                    split_sizes=None):
    n = len(speakers)
    if split_sizes is not None:
        sizes = [split_sizes[s] for s in SPLITS]
        if sum(sizes) != n or any(sz < min_per_split for sz in sizes):
            raise DataError(
                f"build_corpus: split sizes {split_sizes} need to sum to "
                f"{n} speakers with at least {min_per_split} per split")
        n_train, n_valid = sizes[0], sizes[1]
    else:
        n_train = max(min_per_split, int(round(n * fracs[0])))
        n_valid = max(min_per_split, int(round(n * fracs[1])))
        if n - n_train - n_valid < min_per_split:
            raise DataError(
                f"build_corpus: {n} speakers cannot give {min_per_split}+ "
                "speakers in each of train/valid/test")
    return {"train": speakers[:n_train],
            "valid": speakers[n_train:n_train + n_valid],
            "test": speakers[n_train + n_valid:]}


def build_corpus(root, n_speakers: int, utt_per_speaker: int,
                 mixture_counts: dict, seed: int,
                 duration_s: float = 0.5,
                 noise_floor: float = 0.10,
                 split_sizes: dict = None) -> dict:
    """Generate a toy corpus under `root`.

    mixture_counts: {C: count} or {C: {split: count}}; a bare count applies
    to every split. split_sizes optionally fixes the per-split speaker
    counts, e.g. {"train": 4, "valid": 4, "test": 4}; the default is a
    50/25/25 split. Returns {split: manifest path}. Byte-identical given
    the same arguments (derived per-sample seeds, sorted key order).
    """
    speakers = make_speakers(n_speakers, seed, noise_floor)
    min_per = max(int(c) for c in mixture_counts)
    splits = _split_speakers(speakers, min_per_split=max(2, min_per),
                             split_sizes=split_sizes)
    os.makedirs(root, exist_ok=True)
    manifests = {}
    for split_idx, split in enumerate(SPLITS):
        pool = splits[split]
        sdir = os.path.join(root, split)
        os.makedirs(sdir, exist_ok=True)
        # utterance pool per speaker
        utts = {}
        for spk_i, spk in enumerate(pool):
            paths = []
            for u in range(utt_per_speaker):
                w = synth_utterance(spk, duration_s,
                                    seed=[seed, split_idx, spk_i, u])
                rel = os.path.join(split, f"{spk.id}_u{u:03d}.wav")
                wav_write(os.path.join(root, rel), w)
                paths.append(rel)
            utts[spk.id] = paths
        records = []
        mix_i = 0
        for c_key in sorted(mixture_counts, key=int):
            c = int(c_key)
            if c > len(pool):
                raise DataError(
                    f"build_corpus: {split} has {len(pool)} speakers, "
                    f"cannot mix C={c}")
            want = mixture_counts[c_key]
            count = want[split] if isinstance(want, dict) else want
            for _ in range(count):
                samp_seed = [seed, split_idx, 1000 + mix_i]
                rng = np.random.default_rng(samp_seed)
                chosen = rng.choice(len(pool), size=c, replace=False)
                ids = [pool[j].id for j in chosen]
                src_paths = [utts[i][rng.integers(utt_per_speaker)]
                             for i in ids]
                sources = [wav_read(os.path.join(root, p))[0]
                           for p in src_paths]
                mix = make_mixture(sources, ids, seed=samp_seed + [1])
                # fold any headroom scaling into the recorded gains so the
                # stored mixture stays inside PCM16 full scale
                peak = np.max(np.abs(mix.x))
                alpha = min(1.0, 0.99 / peak) if peak > 0 else 1.0
                gains = [alpha * g for g in mix.gains]
                rel = os.path.join(split, f"mix{mix_i:05d}_c{c}.wav")
                wav_write(os.path.join(root, rel), alpha * mix.x)
                records.append({"mixture": rel, "sources": src_paths,
                                "speakers": ids, "gains": gains,
                                "seed": samp_seed})
                mix_i += 1
        mpath = os.path.join(root, f"{split}.jsonl")
        with open(mpath, "w") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        manifests[split] = mpath
    return manifests


@dataclass
class ManifestEntry:
    mixture: np.ndarray
    sources: list  # scaled: gain_i * s_i, summing to the mixture
    speaker_ids: list
    gains: list


def load_manifest(path, root=None) -> list[ManifestEntry]:
    """Load every entry of a JSONL manifest into memory."""
    root = root or os.path.dirname(os.path.abspath(path))
    entries = []
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{ln}: bad manifest record: {e}") from e
        x, _ = wav_read(os.path.join(root, rec["mixture"]))
        raws = [wav_read(os.path.join(root, p))[0] for p in rec["sources"]]
        scaled = [g * s for g, s in zip(rec["gains"], raws)]
        entries.append(ManifestEntry(mixture=x, sources=scaled,
                                     speaker_ids=rec["speakers"],
                                     gains=rec["gains"]))
    if not entries:
        raise DataError(f"{path}: empty manifest")
    return entries


def embedder_corpus(root, split: str = "train") -> list:
    """(clip, speaker id) pairs from a split's utterance pool, for the
    speaker classifier. Clips are cut to exact 500 ms windows."""
    sdir = os.path.join(root, split)
    clip_len = SAMPLE_RATE // 2
    pairs = []
    for name in sorted(os.listdir(sdir)):
        if not name.endswith(".wav") or name.startswith("mix"):
            continue
        spk = name.split("_")[0]
        w, _ = wav_read(os.path.join(sdir, name))
        for start in range(0, len(w) - clip_len + 1, clip_len):
            pairs.append((w[start:start + clip_len], spk))
    if not pairs:
        raise DataError(f"embedder_corpus: no utterances under {sdir}")
    return pairs
