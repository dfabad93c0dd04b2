"""Inference-side procedures: scoring, speaker-count selection, test-time
augmentation, the channel-switch metric, and ideal-mask oracles."""

import json
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import data
from . import dsp
from . import losses
from . import model as separator
from .errors import ConfigurationError, DataError, InputError

ACTIVITY_FLOOR = 1e-12
SWITCH_ENERGY_GATE_DB = -60.0
SWITCH_CLIP_S = 0.25


def si_snr_value(target, estimate) -> float:
    return losses.si_snr(np.asarray(target, dtype=np.float64),
                         np.asarray(estimate, dtype=np.float64)).item()


def align(targets, estimates) -> losses.PermutationAssignment:
    """Optimal channel-to-target assignment (no gradients involved)."""
    mat = losses.pairwise_matrix(
        [np.asarray(t, dtype=np.float64) for t in targets],
        [np.asarray(e, dtype=np.float64) for e in estimates])
    perm = losses.best_permutation(mat)
    score = float(np.mean([mat[i, perm[i]] for i in range(len(perm))]))
    return losses.PermutationAssignment(perm=perm, score=score)


def si_snri(targets, estimates, mixture) -> float:
    """Mean per-channel SI-SNR improvement over scoring the raw mixture.

    Channels must already be aligned (estimate i belongs to target i).
    """
    if len(targets) != len(estimates):
        raise InputError(
            f"si_snri: {len(targets)} targets vs {len(estimates)} estimates")
    vals = [si_snr_value(t, e) - si_snr_value(t, mixture)
            for t, e in zip(targets, estimates)]
    return float(np.mean(vals))


def aligned_si_snri(targets, estimates, mixture) -> tuple:
    """(SI-SNRi at the optimal permutation, that permutation)."""
    assign = align(targets, estimates)
    ordered = [estimates[assign.perm[i]] for i in range(len(targets))]
    return si_snri(targets, ordered, mixture), assign.perm


def activity_level(ch: np.ndarray) -> float:
    """Average power of a channel in dB, floored at -120 dB."""
    ch = np.asarray(ch, dtype=np.float64)
    if ch.size == 0:
        raise InputError("activity_level: empty channel")
    return float(10.0 * np.log10(np.mean(np.square(ch)) + ACTIVITY_FLOOR))


@dataclass
class SelectionReport:
    chosen_c: int
    threshold: float
    path: list = field(default_factory=list)        # C values visited
    levels: dict = field(default_factory=dict)      # C -> per-channel dB

    def validate(self) -> None:
        if self.path != sorted(self.path, reverse=True):
            raise InputError("cascade path must strictly descend")


def select_count(x, models: dict, threshold: float):
    """Descend from the largest-C model while any channel looks silent.

    models: {C: SeparatorModel}, contiguous C range. Returns
    (SelectionReport, channels of the accepted model).
    """
    cs = sorted(models)
    if cs != list(range(cs[0], cs[-1] + 1)):
        raise ConfigurationError(
            f"select_count: model set {cs} is not a contiguous C range")
    report = SelectionReport(chosen_c=cs[-1], threshold=float(threshold))
    chans = None
    for c in reversed(cs):
        chans = separator.separate(models[c], x)
        levels = [activity_level(ch) for ch in chans]
        report.path.append(c)
        report.levels[c] = levels
        report.chosen_c = c
        if all(lv >= threshold for lv in levels):
            break
    return report, chans


def calibrate_threshold(samples, models, grid=None) -> float:
    """Pick the activity threshold that best recovers known counts.

    samples: iterable of (mixture, true C). Deterministic: ties go to the
    lowest grid value. Separations are computed once per (sample, model).
    """
    samples = list(samples)
    if not samples:
        raise DataError("calibrate_threshold: empty validation set")
    if grid is None:
        grid = np.arange(-70.0, -9.9, 2.5)
    grid = [float(g) for g in grid]
    # precompute per-sample per-C channel levels
    level_sets = []
    for x, true_c in samples:
        per_c = {c: [activity_level(ch)
                     for ch in separator.separate(m, x)]
                 for c, m in models.items()}
        level_sets.append((per_c, true_c))
    cs = sorted(models)
    best_thr, best_acc = grid[0], -1.0
    for thr in grid:
        hits = 0
        for per_c, true_c in level_sets:
            chosen = cs[0]
            for c in reversed(cs):
                chosen = c
                if all(lv >= thr for lv in per_c[c]):
                    break
            hits += chosen == true_c
        acc = hits / len(level_sets)
        if acc > best_acc:
            best_thr, best_acc = thr, acc
    return best_thr


def tta_separate(x, model, k: int, seed: int) -> list:
    """Average separations of k random cyclic rotations of the input.

    The unshifted separation is the reference; each rotated result is
    un-rotated, channel-matched to the reference by total MSE over all
    channels (brute force), and accumulated. k=0 returns the reference
    bit-exactly.
    """
    if k < 0:
        raise InputError("tta_separate: k must be nonnegative")
    x = np.asarray(x, dtype=np.float32)
    reference = separator.separate(model, x)
    if k == 0:
        return reference
    c = len(reference)
    acc = [ch.astype(np.float64) for ch in reference]
    rng = np.random.default_rng(seed)
    for _ in range(k):
        cut = int(rng.integers(len(x)))
        rolled = separator.separate(model, np.roll(x, -cut))
        undone = [np.roll(ch, cut) for ch in rolled]
        best_perm, best_mse = None, None
        for perm in permutations(range(c)):
            mse = sum(float(np.mean(np.square(
                undone[perm[i]] - reference[i]))) for i in range(c))
            if best_mse is None or mse < best_mse:
                best_perm, best_mse = perm, mse
        for i in range(c):
            acc[i] += undone[best_perm[i]]
    return [a / (k + 1) for a in acc]


def switch_rate(entries, model, clip_s: float = SWITCH_CLIP_S,
                outputs=None) -> float:
    """Fraction of samples whose channel-to-target matching changes over
    time.

    Each sample is cut into clip_s sub-clips; within each sub-clip every
    output channel is assigned to its best-SI-SNR target. Sub-clips whose
    target energy falls below -60 dB are excluded (argmax over silence is
    noise). A sample counts as switching if any channel's assignment
    changes across the included sub-clips.
    """
    entries = list(entries)
    if not entries:
        raise DataError("switch_rate: no samples")
    flagged = 0
    for idx, entry in enumerate(entries):
        ests = (outputs[idx] if outputs is not None
                else separator.separate(model, entry.mixture))
        clip = int(round(clip_s * data.SAMPLE_RATE))
        if flag_switch(entry.sources, ests, clip):
            flagged += 1
    return flagged / len(entries)


def flag_switch(targets, estimates, clip_len: int) -> bool:
    n = len(targets[0])
    assignments = [[] for _ in estimates]
    for start in range(0, n - clip_len + 1, clip_len):
        sl = slice(start, start + clip_len)
        tclips = [np.asarray(t[sl], dtype=np.float64) for t in targets]
        if any(activity_level(tc) < SWITCH_ENERGY_GATE_DB for tc in tclips):
            continue
        for j, e in enumerate(estimates):
            eclip = np.asarray(e[sl], dtype=np.float64)
            scores = [losses.si_snr(tc, eclip).item() for tc in tclips]
            assignments[j].append(int(np.argmax(scores)))
    return any(len(set(a)) > 1 for a in assignments)


# --- ideal-mask oracles (32 ms window, 8 ms hop, 2048-point FFT) ---

ORACLE_WIN_MS = 32
ORACLE_HOP_MS = 8
ORACLE_NFFT = 2048


def _oracle_specs(x, sources, sample_rate):
    win = sample_rate * ORACLE_WIN_MS // 1000
    hop = sample_rate * ORACLE_HOP_MS // 1000
    mix_spec = dsp.stft(x, win, hop, ORACLE_NFFT, sample_rate=sample_rate)
    src_mags = [np.abs(dsp.stft(s, win, hop, ORACLE_NFFT,
                                sample_rate=sample_rate).bins)
                for s in sources]
    return mix_spec, src_mags


def ibm_oracle(x, sources, sample_rate: int = 8000) -> list:
    """Ideal binary masks: per-bin one-hot on the loudest source, applied
    to the mixture spectrogram with mixture phase."""
    if len(sources) == 1:
        return [np.asarray(x, dtype=np.float64).copy()]
    mix_spec, mags = _oracle_specs(x, sources, sample_rate)
    stacked = np.stack(mags)
    winner = np.argmax(stacked, axis=0)
    return [dsp.mixture_phase_reconstruct((winner == i).astype(np.float64),
                                          mix_spec)
            for i in range(len(sources))]


def irm_oracle(x, sources, sample_rate: int = 8000) -> list:
    """Ideal ratio masks |S_i| / sum_j |S_j| (denominator floored)."""
    if len(sources) == 1:
        return [np.asarray(x, dtype=np.float64).copy()]
    mix_spec, mags = _oracle_specs(x, sources, sample_rate)
    total = np.maximum(np.sum(np.stack(mags), axis=0), 1e-12)
    return [dsp.mixture_phase_reconstruct(m / total, mix_spec)
            for m in mags]


def irm_masks(x, sources, sample_rate: int = 8000) -> list:
    """The ratio masks themselves (for invariant checks)."""
    _, mags = _oracle_specs(x, sources, sample_rate)
    total = np.maximum(np.sum(np.stack(mags), axis=0), 1e-12)
    return [m / total for m in mags]


# --- evaluation reports ---

@dataclass
class SampleResult:
    index: int
    si_snri: float
    perm: tuple
    switched: bool
    true_c: int
    selected_c: int


@dataclass
class EvalReport:
    samples: list = field(default_factory=list)

    @property
    def mean_si_snri(self) -> float:
        return float(np.mean([s.si_snri for s in self.samples]))

    @property
    def switch_fraction(self) -> float:
        return float(np.mean([s.switched for s in self.samples]))

    def confusion(self) -> dict:
        """{true C: {selected C: count}}; rows sum to per-class totals."""
        table: dict = {}
        for s in self.samples:
            row = table.setdefault(s.true_c, {})
            row[s.selected_c] = row.get(s.selected_c, 0) + 1
        return table

    def count_accuracy(self) -> float:
        hits = sum(s.selected_c == s.true_c for s in self.samples)
        return hits / len(self.samples)

    def to_text(self) -> str:
        lines = []
        for s in self.samples:
            lines.append(json.dumps({
                "index": s.index, "si_snri": round(s.si_snri, 6),
                "perm": list(s.perm), "switched": s.switched,
                "true_c": s.true_c, "selected_c": s.selected_c},
                sort_keys=True))
        lines.append("# aggregate " + json.dumps({
            "mean_si_snri": round(self.mean_si_snri, 6),
            "switch_fraction": round(self.switch_fraction, 6),
            "count_accuracy": round(self.count_accuracy(), 6)},
            sort_keys=True))
        lines.append(self.confusion_table())
        return "\n".join(lines) + "\n"

    def confusion_table(self) -> str:
        """Percentage table, true counts as rows, selected as columns."""
        table = self.confusion()
        cols = sorted({c for row in table.values() for c in row}
                      | set(table))
        out = ["# confusion (%)  selected: " +
               " ".join(f"{c:>6d}" for c in cols)]
        for true_c in sorted(table):
            total = sum(table[true_c].values())
            cells = [100.0 * table[true_c].get(c, 0) / total for c in cols]
            out.append(f"# true {true_c}:          " +
                       " ".join(f"{v:6.1f}" for v in cells))
        return "\n".join(out)


def evaluate(entries, model, tta_k: int = 0, seed: int = 0,
             models=None, threshold=None) -> EvalReport:
    """Score a manifest's entries with one model or a selection cascade.

    When `models` (a C->model cascade) and `threshold` are given, the
    speaker count is auto-selected per sample; otherwise `model` runs
    as-is. Scoring uses c*s references and optimal channel assignment.
    """
    report = EvalReport()
    for idx, entry in enumerate(entries):
        true_c = len(entry.sources)
        if models is not None:
            sel, ests = select_count(entry.mixture, models, threshold)
            selected_c = sel.chosen_c
        else:
            ests = (tta_separate(entry.mixture, model, tta_k, seed + idx)
                    if tta_k > 0 else separator.separate(model,
                                                         entry.mixture))
            selected_c = len(ests)
        # score against references using the top min(C) channels
        refs = entry.sources
        if len(ests) > len(refs):
            # superfluous channels: keep the best-matching subset via the
            # optimal assignment of refs into estimates
            mat = np.array([[si_snr_value(r, e) for e in ests]
                            for r in refs])
            used = _best_injection(mat)
            ests_used = [ests[j] for j in used]
            value = si_snri(refs, ests_used, entry.mixture)
            perm = tuple(used)
        elif len(ests) < len(refs):
            raise InputError(
                f"evaluate: {len(ests)} channels for {len(refs)} sources")
        else:
            value, perm = aligned_si_snri(refs, ests, entry.mixture)
        clip = int(round(SWITCH_CLIP_S * data.SAMPLE_RATE))
        ordered = [ests[perm[i]] for i in range(len(refs))]
        switched = (flag_switch(refs, ordered, clip)
                    if len(refs[0]) >= 2 * clip else False)
        report.samples.append(SampleResult(
            index=idx, si_snri=value, perm=perm, switched=switched,
            true_c=true_c, selected_c=selected_c))
    return report


def _best_injection(mat: np.ndarray) -> tuple:
    """Best one-to-one map of each row (target) to a distinct column
    (estimate), maximizing the mean score; brute force, C <= 5 rows."""
    rows, cols = mat.shape
    best, best_val = None, None
    for perm in permutations(range(cols), rows):
        val = sum(mat[i, perm[i]] for i in range(rows))
        if best_val is None or val > best_val:
            best, best_val = perm, val
    return best
