"""Scoring: per-type F1, word error rate and the rank-sum test.

F1 is computed per stutter type over (type, word index) matches, plus a
Non-Stutter category scored at word granularity (a word counts as
correct when neither the intent nor the detection places an event on
it). Utterances whose detection failed outright are excluded from
scoring and only counted.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import frontend as fe
from . import synthdata as sd
from . import training as tr
from .inference import SynthesisRequest, batch_synthesize
from .model import ModelConfig

log = logging.getLogger(__name__)

CATEGORIES = ("Repetition", "Phonation", "Block", "Non-Stutter")

_TYPE_LABEL = {fe.StutterType.REPETITION: "Repetition",
               fe.StutterType.PHONATION: "Phonation",
               fe.StutterType.BLOCK: "Block"}


@dataclass
class CategoryScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class F1Report:
    categories: dict[str, CategoryScore]
    excluded: int = 0

    def f1(self, category: str) -> float:
        return self.categories[category].f1


@dataclass
class ScoredUtterance:
    """One probe: what was asked for vs what the detector found.

    detected is None when detection failed (unintelligible output);
    such utterances are excluded from the scores.
    """
    expected: list  # StutterEvent
    detected: list | None
    n_words: int


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return CategoryScore(p, r, f1, tp + fn)


def score_events(utterances) -> F1Report:
    counts = {c: [0, 0, 0] for c in CATEGORIES}  # tp, fp, fn
    excluded = 0
    for utt in utterances:
        if utt.detected is None:
            excluded += 1
            continue
        exp = {(ev.type, ev.word_index) for ev in utt.expected}
        det = {(ev.type, ev.word_index) for ev in utt.detected}
        for t, label in _TYPE_LABEL.items():
            e = {k for k in exp if k[0] == t}
            d = {k for k in det if k[0] == t}
            counts[label][0] += len(e & d)
            counts[label][1] += len(d - e)
            counts[label][2] += len(e - d)
        exp_words = {w for _, w in exp}
        det_words = {w for _, w in det}
        for w in range(utt.n_words):
            if w not in exp_words and w not in det_words:
                counts["Non-Stutter"][0] += 1
            elif w in exp_words and w not in det_words:
                counts["Non-Stutter"][1] += 1
            elif w not in exp_words and w in det_words:
                counts["Non-Stutter"][2] += 1
    return F1Report({c: _prf(*counts[c]) for c in CATEGORIES}, excluded)


# ---------------------------------------------------------------------------
# word error rate

def wer(reference, hypothesis) -> float:
    """Edit distance (substitutions + insertions + deletions) over the
    reference length. An empty reference scores len(hypothesis)."""
    ref, hyp = list(reference), list(hypothesis)
    if not ref:
        return float(len(hyp))
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


# ---------------------------------------------------------------------------
# Wilcoxon rank-sum

EXACT_LIMIT = 12


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    svals = np.asarray(values)[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and svals[j + 1] == svals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _exact_p(doubled, nx, w2):
    """Two-sided exact p for rank-sum w2 (doubled mid-ranks, so integer
    arithmetic) under uniform choice of which nx ranks belong to x."""
    total = len(doubled)
    max_sum = sum(doubled)
    # dp[k][s] = number of k-subsets of the ranks seen so far summing to s
    dp = [[0] * (max_sum + 1) for _ in range(nx + 1)]
    dp[0][0] = 1
    for r in doubled:
        for k in range(min(nx, total), 0, -1):
            row, prev = dp[k], dp[k - 1]
            for s in range(max_sum, r - 1, -1):
                if prev[s - r]:
                    row[s] += prev[s - r]
    counts = dp[nx]
    n_total = sum(counts)
    lo = sum(c for s, c in enumerate(counts) if s <= w2)
    hi = sum(c for s, c in enumerate(counts) if s >= w2)
    return min(1.0, 2.0 * min(lo / n_total, hi / n_total))


def wilcoxon_rank_sum(x, y):
    """Two-sided rank-sum test; returns (rank sum of x, p value).

    Exact when both samples have at most 12 points, otherwise a normal
    approximation with tie-corrected variance and continuity correction.
    Ties get mid-ranks in either branch.
    """
    x, y = list(map(float, x)), list(map(float, y))
    nx, ny = len(x), len(y)
    if nx == 0 or ny == 0:
        raise ValueError("both samples must be non-empty")
    combined = np.array(x + y)
    ranks = _midranks(combined)
    w = float(ranks[:nx].sum())
    n = nx + ny
    if len(set(combined)) == 1:
        return w, 1.0
    if nx <= EXACT_LIMIT and ny <= EXACT_LIMIT:
        doubled = [int(round(2 * r)) for r in ranks]
        return w, _exact_p(doubled, nx, int(round(2 * w)))
    mu = nx * (n + 1) / 2
    _, tie_counts = np.unique(combined, return_counts=True)
    tie_term = float(((tie_counts ** 3 - tie_counts).sum())) / (n * (n - 1))
    var = nx * ny / 12 * ((n + 1) - tie_term)
    if var <= 0:
        return w, 1.0
    z = (abs(w - mu) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    p = 2 * (1 - 0.5 * (1 + math.erf(z / math.sqrt(2))))
    return w, min(1.0, p)


# ---------------------------------------------------------------------------
# ratio sweep

@dataclass
class SweepConfig:
    ratios: list[str] = field(default_factory=lambda: ["100:0", "90:10"])
    probe_utts: int = 100
    probe_words_min: int = 2
    probe_words_max: int = 4
    probe_seed: int = 0
    stop_threshold: float = 0.5
    max_decode_frames: int | None = None
    seed: int = 0


def parse_ratio(text: str):
    try:
        f, s = (int(part) for part in text.split(":"))
    except ValueError as e:
        raise tr.ConfigurationError(f"bad ratio {text!r}: expected F:S") from e
    if f < 0 or s < 0 or f + s <= 0:
        raise tr.ConfigurationError(f"bad ratio {text!r}")
    return f, s


def make_probe_requests(cfg: SweepConfig, reference, word_list=None):
    """Probe transcripts, each with exactly one randomly placed event."""
    words_pool = word_list or fe.default_word_list()
    rng = np.random.default_rng([cfg.probe_seed, 23])
    reqs = []
    for i in range(cfg.probe_utts):
        n = int(rng.integers(cfg.probe_words_min, cfg.probe_words_max + 1))
        words = [words_pool[int(rng.integers(len(words_pool)))]
                 for _ in range(n)]
        text = fe.insert_random_stutter(words, None, rng)
        reqs.append(SynthesisRequest(
            utt_id=f"probe{i:05d}", transcript=fe.render_transcript(text),
            reference=reference, stop_threshold=cfg.stop_threshold,
            max_decode_frames=cfg.max_decode_frames,
            seed=cfg.probe_seed * 100_000 + i))
    return reqs


def run_ratio_sweep(corpus_dir, out_dir, sweep: SweepConfig,
                    train_cfg: tr.TrainConfig,
                    model_cfg: ModelConfig | None = None):
    """Train once per ratio, synthesize the shared probe set, detect and
    score. Writes f1_by_ratio.csv; returns {ratio: (F1Report, model)}."""
    corpus_dir = Path(corpus_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lexicon = fe.Lexicon.load(corpus_dir / "lexicon.tsv")
    speakers = sd.load_speakers(corpus_dir)
    manifest = sd.read_manifest(corpus_dir / "manifest.jsonl")
    rules = _corpus_rules(corpus_dir)

    # reference audio: the longest fluent utterance of the first speaker
    ref_speaker_id = sorted(speakers)[0]
    candidates = [e for e in manifest
                  if e.speaker_id == ref_speaker_id and not e.events]
    if not candidates:
        raise tr.ConfigurationError("no fluent reference utterance available")
    ref_entry = max(candidates, key=lambda e: e.n_frames)
    reference = sd.read_features(corpus_dir / ref_entry.feature_path)
    # probe within the training vocabulary
    word_list = _corpus_config(corpus_dir).get("word_list")
    requests = make_probe_requests(sweep, reference, word_list=word_list)

    results = {}
    rows = []
    for ratio_text in sweep.ratios:
        f, s = parse_ratio(ratio_text)
        cfg = dataclasses.replace(train_cfg, ratio_fluent=f, ratio_stuttered=s)
        tag = ratio_text.replace(":", "-")
        log.info("ratio %s: training", ratio_text)
        model, _ = tr.train(cfg, model_cfg, corpus_dir, out_dir / f"train_{tag}")
        inventory = fe.PhonemeInventory.load(corpus_dir / "inventory.txt")
        synth_dir = out_dir / f"probe_{tag}"
        entries = batch_synthesize(model, requests, inventory, lexicon,
                                   synth_dir)
        scored = []
        for entry in entries:
            if not entry.ok:
                scored.append(ScoredUtterance([], None, 0))
                continue
            text = fe.parse_transcript(entry.transcript)
            feats = sd.read_features(synth_dir / entry.feature_path)
            try:
                detected = sd.detect_stutter_events(
                    feats, speakers[ref_speaker_id], text.words, lexicon,
                    rules)
            except sd.UnintelligibleError:
                detected = None
            scored.append(ScoredUtterance(list(text.events), detected,
                                          len(text.words)))
        report = score_events(scored)
        results[ratio_text] = (report, model)
        rows.append([ratio_text] + [f"{report.f1(c):.4f}" for c in CATEGORIES])
        log.info("ratio %s: F1 %s", ratio_text,
                 {c: round(report.f1(c), 3) for c in CATEGORIES})

    with open(out_dir / "f1_by_ratio.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", *CATEGORIES])
        writer.writerows(rows)
    return results


def _corpus_config(corpus_dir) -> dict:
    with open(Path(corpus_dir) / "corpus_config.json", encoding="utf-8") as fh:
        return json.load(fh)


def _corpus_rules(corpus_dir) -> sd.RenderRules:
    cc = _corpus_config(corpus_dir)
    rules = sd.RenderRules(feature_dim=int(cc["feature_dim"]))
    if cc.get("duration_min") is not None:
        rules.duration_min = int(cc["duration_min"])
    if cc.get("duration_max") is not None:
        rules.duration_max = int(cc["duration_max"])
    if cc.get("block_min") is not None:
        rules.block_min = int(cc["block_min"])
    if cc.get("block_max") is not None:
        rules.block_max = int(cc["block_max"])
    return rules
