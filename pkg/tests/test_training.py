"""Tests for batching, the ratio sampler, the train loop and checkpoints."""

import logging

import numpy as np
import pytest

from stutter_tts import autograd as ag
from stutter_tts import synthdata as sd
from stutter_tts import training as tr
from stutter_tts.model import ModelConfig, StutterTTS


def tiny_model_config(n_phonemes):
    return ModelConfig(
        n_phonemes=n_phonemes, d_model=16, n_heads=2,
        n_encoder_layers=1, n_decoder_layers=1, d_ff=32,
        feature_dim=16, prenet_hidden=16, prenet_bottleneck=8,
        postnet_layers=2, postnet_width=8, postnet_kernel=3,
        ref_frames=8, ref_width=16)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    sd.generate_corpus(sd.CorpusConfig(
        n_speakers=2, utts_per_speaker=8, stutter_fraction=0.5,
        sentence_len_min=2, sentence_len_max=3, seed=7), out)
    return out


class FakeItem:
    def __init__(self, utt_id, n_frames):
        self.utt_id = utt_id
        self.targets = np.zeros((n_frames, 4), dtype=np.float32)
        self.stuttered = False


# ---------------------------------------------------------------------------
# config + sampler

def test_config_rejects_negative_ratio():
    with pytest.raises(tr.ConfigurationError):
        tr.TrainConfig(ratio_fluent=-1, ratio_stuttered=10)


def test_config_rejects_zero_ratio():
    with pytest.raises(tr.ConfigurationError):
        tr.TrainConfig(ratio_fluent=0, ratio_stuttered=0)


def test_config_rejects_mismatched_buckets():
    with pytest.raises(tr.ConfigurationError):
        tr.TrainConfig(bucket_boundaries=[10, 20], bucket_batch_sizes=[2])


def test_sampler_hits_ratio():
    fl = [FakeItem(f"f{i}", 4) for i in range(5)]
    st = [FakeItem(f"s{i}", 4) for i in range(5)]
    for i, item in enumerate(st):
        item.stuttered = True
    rng = np.random.default_rng(0)
    gen = tr.ratio_sampler(fl, st, (90, 10), rng)
    n = 100_000
    frac = sum(next(gen).stuttered for _ in range(n)) / n
    assert abs(frac - 0.10) < 0.005


def test_sampler_pure_fluent_never_draws_stuttered():
    fl = [FakeItem("f0", 4)]
    st = [FakeItem("s0", 4)]
    st[0].stuttered = True
    gen = tr.ratio_sampler(fl, st, (100, 0), np.random.default_rng(1))
    assert not any(next(gen).stuttered for _ in range(5000))


def test_sampler_within_pool_uniform():
    fl = [FakeItem(f"f{i}", 4) for i in range(10)]
    gen = tr.ratio_sampler(fl, [], (1, 0), np.random.default_rng(2))
    counts = {}
    n = 50_000
    for _ in range(n):
        uid = next(gen).utt_id
        counts[uid] = counts.get(uid, 0) + 1
    # reshuffled epochs: every item exactly n/10 times up to the tail epoch
    assert all(abs(c - n / 10) <= 1 for c in counts.values())


def test_sampler_empty_required_pool_is_an_error():
    with pytest.raises(tr.ConfigurationError):
        tr.ratio_sampler([FakeItem("f", 4)], [], (90, 10),
                         np.random.default_rng(0))
    with pytest.raises(tr.ConfigurationError):
        tr.ratio_sampler([], [FakeItem("s", 4)], (90, 10),
                         np.random.default_rng(0))


# ---------------------------------------------------------------------------
# bucketing

def test_buckets_are_homogeneous_and_sized():
    rng = np.random.default_rng(3)
    items = [FakeItem(f"u{i}", int(rng.integers(1, 30))) for i in range(200)]
    bounds, sizes = [10, 30], [4, 2]
    seen = 0
    for batch in tr.bucket_batches(iter(items), bounds, sizes):
        lengths = [it.targets.shape[0] for it in batch.items]
        bucket = 0 if max(lengths) <= 10 else 1
        assert all(l <= bounds[bucket] for l in lengths)
        if bucket == 1:
            assert all(l > 10 for l in lengths)
        assert len(batch.items) == sizes[bucket]
        assert batch.padded.shape == (sizes[bucket], max(lengths), 4)
        assert np.array_equal(batch.mask.sum(axis=1), np.array(lengths))
        seen += len(batch.items)
    assert seen > 150  # only trailing partial buffers may be unflushed


def test_over_length_utterances_are_skipped_with_warning(caplog):
    items = [FakeItem("short", 5), FakeItem("huge", 99), FakeItem("short2", 5)]
    with caplog.at_level(logging.WARNING, logger="stutter_tts.training"):
        batches = list(tr.bucket_batches(iter(items), [10], [2]))
    assert len(batches) == 1
    assert [it.utt_id for it in batches[0].items] == ["short", "short2"]
    assert any("huge" in rec.getMessage() for rec in caplog.records)


def test_padding_mask_recovers_exact_targets():
    items = [FakeItem("a", 3), FakeItem("b", 7)]
    for it in items:
        it.targets = np.random.default_rng(5).normal(
            size=it.targets.shape).astype(np.float32)
    batch = tr._make_batch(items)
    for i, it in enumerate(items):
        assert np.array_equal(batch.padded[i][batch.mask[i]], it.targets)
        assert not batch.padded[i][~batch.mask[i]].any()


def test_masked_batch_loss_matches_per_utterance(tiny_corpus):
    items, inventory, _ = tr.load_training_data(tiny_corpus)
    items = items[:3]
    model = StutterTTS(tiny_model_config(len(inventory)), seed=0)
    batch = tr._make_batch(items)
    totals, _ = tr.batch_loss_parts(model, batch, np.random.default_rng(9),
                                    lambda_stop=1.0)
    rng = np.random.default_rng(9)
    for item, total in zip(items, totals):
        ref, _ = model.forward_teacher_forced(
            item.ids, item.targets, item.targets, rng, mode="train")
        assert abs(total.item() - ref.item()) < 1e-6


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    cfg = tiny_model_config(48)
    model = StutterTTS(cfg, seed=4)
    opt = ag.Optimizer("adam", 1e-3)
    # take a real step so the moment buffers are populated
    rng = np.random.default_rng(6)
    ids = [0, 3, 5]
    targets = rng.normal(size=(12, cfg.feature_dim))
    total, _ = model.forward_teacher_forced(ids, targets, targets, rng)
    total.backward()
    opt.step(model.params)

    p1 = tmp_path / "a.ckpt"
    tr.save_checkpoint(p1, model, opt, rng, step=17, train_cfg=tr.TrainConfig())
    model2, opt2, rng2, step, tcfg = tr.load_checkpoint(p1)
    assert step == 17
    assert tcfg == tr.TrainConfig()
    assert opt2.step_count == opt.step_count
    assert rng2.random() == rng.random()
    p2 = tmp_path / "b.ckpt"
    tr.save_checkpoint(p2, model2, opt2, np.random.default_rng(6), step=17,
                       train_cfg=tcfg)
    # rng state differs between the two saves; compare tensors directly
    for name, p in model.params.items():
        assert np.array_equal(p.data, model2.params[name].data), name
    for name in opt.m:
        assert np.array_equal(opt.m[name], opt2.m[name])
        assert np.array_equal(opt.v[name], opt2.v[name])


def test_checkpoint_identical_state_identical_bytes(tmp_path):
    cfg = tiny_model_config(48)
    paths = []
    for tag in ("a", "b"):
        model = StutterTTS(cfg, seed=4)
        opt = ag.Optimizer("adam", 1e-3)
        rng = np.random.default_rng(8)
        path = tmp_path / f"{tag}.ckpt"
        tr.save_checkpoint(path, model, opt, rng, step=0)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(sd.FormatError):
        tr.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = tiny_model_config(48)
    model = StutterTTS(cfg, seed=4)
    path = tmp_path / "good.ckpt"
    tr.save_checkpoint(path, model, ag.Optimizer("adam", 1e-3),
                       np.random.default_rng(0), step=0)
    blob = path.read_bytes()
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(sd.FormatError):
        tr.load_checkpoint(trunc)


# ---------------------------------------------------------------------------
# the loop

def quick_train_cfg(**kw):
    base = dict(ratio_fluent=50, ratio_stuttered=50,
                bucket_boundaries=[2000], bucket_batch_sizes=[2],
                steps_per_epoch=2, epochs=2, learning_rate=1e-3, seed=3)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_train_writes_metrics_and_checkpoints(tiny_corpus, tmp_path):
    items, inventory, _ = tr.load_training_data(tiny_corpus)
    cfg = quick_train_cfg()
    model, rows = tr.train(cfg, tiny_model_config(len(inventory)),
                           tiny_corpus, tmp_path / "run")
    assert len(rows) == 4
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert lines[0] == tr.METRICS_HEADER
    assert lines[1:] == rows
    assert (tmp_path / "run" / "checkpoint_epoch1.ckpt").exists()
    assert (tmp_path / "run" / "checkpoint_epoch2.ckpt").exists()
    first = rows[0].split(",")
    assert int(first[0]) == 1 and float(first[1]) > 0


def test_train_zero_lr_leaves_loss_constant(tiny_corpus, tmp_path):
    items, inventory, _ = tr.load_training_data(tiny_corpus)
    cfg = quick_train_cfg(optimizer="sgd", learning_rate=0.0,
                          steps_per_epoch=3, epochs=1,
                          ratio_fluent=1, ratio_stuttered=0)
    model_cfg = tiny_model_config(len(inventory))
    before = StutterTTS(model_cfg, seed=cfg.seed)
    model, rows = tr.train(cfg, model_cfg, tiny_corpus, tmp_path / "run")
    for name, p in before.params.items():
        assert np.array_equal(p.data, model.params[name].data), name


def test_train_is_deterministic(tiny_corpus, tmp_path):
    items, inventory, _ = tr.load_training_data(tiny_corpus)
    cfg = quick_train_cfg()
    mcfg = tiny_model_config(len(inventory))
    _, rows_a = tr.train(cfg, mcfg, tiny_corpus, tmp_path / "a")
    _, rows_b = tr.train(cfg, mcfg, tiny_corpus, tmp_path / "b")
    assert rows_a == rows_b


def test_resume_replays_the_uninterrupted_run(tiny_corpus, tmp_path):
    items, inventory, _ = tr.load_training_data(tiny_corpus)
    mcfg = tiny_model_config(len(inventory))
    full_cfg = quick_train_cfg(epochs=2)
    model_full, rows_full = tr.train(full_cfg, mcfg, tiny_corpus,
                                     tmp_path / "full")

    half_cfg = quick_train_cfg(epochs=1)
    tr.train(half_cfg, mcfg, tiny_corpus, tmp_path / "half")
    model_res, rows_res = tr.train(
        full_cfg, None, tiny_corpus, tmp_path / "resumed",
        resume_from=tmp_path / "half" / "checkpoint_epoch1.ckpt")

    assert rows_res == rows_full[full_cfg.steps_per_epoch:]
    for name, p in model_full.params.items():
        assert np.array_equal(p.data, model_res.params[name].data), name


def test_train_loss_decreases_when_overfitting(tiny_corpus, tmp_path):
    items, inventory, _ = tr.load_training_data(tiny_corpus)
    cfg = quick_train_cfg(steps_per_epoch=40, epochs=1,
                          bucket_batch_sizes=[1])
    model, rows = tr.train(cfg, tiny_model_config(len(inventory)),
                           tiny_corpus, tmp_path / "run")
    first = np.mean([float(r.split(",")[1]) for r in rows[:5]])
    last = np.mean([float(r.split(",")[1]) for r in rows[-5:]])
    assert last < first


def test_train_rejects_small_vocabulary(tiny_corpus, tmp_path):
    _, inventory, _ = tr.load_training_data(tiny_corpus)
    bad = tiny_model_config(4)
    with pytest.raises(tr.ConfigurationError):
        tr.train(quick_train_cfg(), bad, tiny_corpus, tmp_path / "run")
