"""Context model: areas, branch oracle equivalence, fusion, checkpoints."""

import math

import numpy as np
import pytest

from ercmc import tensor as T
from ercmc.data import Conversation, Utterance
from ercmc.errors import ConfigurationError, ConsistencyError, FormatError
from ercmc.model import (
    ContextModel,
    LocalArea,
    ModelConfig,
    build_local_areas,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_table,
)
from ercmc.tensor import Tensor

import oracles

GRU_NAMES = ("wz", "uz", "bz", "wr", "ur", "br", "wn", "un", "bn")


def make_conv(speakers, prefix="u"):
    return Conversation("conv", [
        Utterance(speaker=s, text=f"{prefix}{i}", label=0)
        for i, s in enumerate(speakers)
    ])


def small_config(**over):
    base = dict(d_m=8, n_heads=2, window=3, n_futures=3, n_labels=4,
                dropout=0.0, seed=0)
    base.update(over)
    return ModelConfig(**base)


def branch_params(model, kind):
    P = model.named_parameters()
    nh = model.cfg.n_heads
    pre = f"branch.{kind}"
    return {
        "wq": [P[f"{pre}.head{p}.wq"].data for p in range(nh)],
        "wk": [P[f"{pre}.head{p}.wk"].data for p in range(nh)],
        "wv": [P[f"{pre}.head{p}.wv"].data for p in range(nh)],
        "wo": P[f"{pre}.wo"].data,
        "w1": P[f"{pre}.ffn.w1"].data,
        "b1": P[f"{pre}.ffn.b1"].data,
        "w2": P[f"{pre}.ffn.w2"].data,
        "b2": P[f"{pre}.ffn.b2"].data,
        "rpk": [P[f"{pre}.rpk.head{p}"].data for p in range(nh)],
        "rpv": [P[f"{pre}.rpv.head{p}"].data for p in range(nh)],
        "ws": P[f"{pre}.gate.ws"].data,
        "gru": {g: P[f"{pre}.gru.{g}"].data for g in GRU_NAMES},
    }


# ---------------------------------------------------------------------------
# configuration validation

def test_head_divisibility_enforced():
    with pytest.raises(ConfigurationError):
        small_config(d_m=10, n_heads=3)


def test_at_least_one_component_required():
    with pytest.raises(ConfigurationError):
        small_config(use_h=False, use_s=False, use_t=False)


def test_unknown_context_and_pos_mode_rejected():
    with pytest.raises(ConfigurationError):
        small_config(contexts=("c", "zz"))
    with pytest.raises(ConfigurationError):
        small_config(pos_mode="fancy")
    with pytest.raises(ConfigurationError):
        small_config(contexts=("raw", "c"))


def test_contexts_normalized_to_canonical_order():
    cfg = small_config(contexts=("pf", "c"))
    assert cfg.contexts == ("c", "pf")


# ---------------------------------------------------------------------------
# local areas

def test_history_area_clips_at_conversation_start():
    conv = make_conv(["A"] * 6)
    emb = np.arange(6 * 4, dtype=np.float64).reshape(6, 4)
    areas = build_local_areas(conv, emb, None, index=2, window=5, n_futures=0,
                              enabled=("c",))
    area = areas["c"]
    assert area.vectors.shape == (3, 4)
    assert np.array_equal(area.vectors, emb[0:3])
    assert area.target_pos == 2


def test_speaker_area_filters_by_speaker():
    conv = make_conv(["A", "B", "A", "B"])
    emb = np.arange(4 * 2, dtype=np.float64).reshape(4, 2)
    areas = build_local_areas(conv, emb, None, index=3, window=5, n_futures=0,
                              enabled=("s",))
    area = areas["s"]
    assert np.array_equal(area.vectors, emb[[1, 3]])
    assert area.target_pos == 1


def test_speaker_area_keeps_most_recent_window():
    conv = make_conv(["A"] * 10)
    emb = np.arange(10 * 2, dtype=np.float64).reshape(10, 2)
    areas = build_local_areas(conv, emb, None, index=9, window=3, n_futures=0,
                              enabled=("s",))
    assert np.array_equal(areas["s"].vectors, emb[[6, 7, 8, 9]])


def test_future_area_puts_target_first():
    conv = make_conv(["A", "B"])
    emb = np.ones((2, 4))
    futures = np.stack([np.full((3, 4), 2.0), np.full((3, 4), 3.0)])
    areas = build_local_areas(conv, emb, futures, index=1, window=5,
                              n_futures=3, enabled=("pf",))
    area = areas["pf"]
    assert area.target_pos == 0
    assert np.array_equal(area.vectors[0], emb[1])
    assert np.array_equal(area.vectors[1:], futures[1])


def test_area_capacity_is_window_plus_one():
    conv = make_conv(["A"] * 12)
    emb = np.zeros((12, 2))
    areas = build_local_areas(conv, emb, None, index=11, window=5, n_futures=0,
                              enabled=("c",))
    assert areas["c"].vectors.shape[0] == 6


# ---------------------------------------------------------------------------
# branch vs straight-line oracle

def test_branch_matches_straightline_oracle_20_instances():
    model = ContextModel(small_config())
    rng = np.random.default_rng(42)
    worst = 0.0
    for trial in range(20):
        kind = ("c", "pf")[trial % 2]
        size = int(rng.integers(1, 5))
        target_pos = size - 1 if kind == "c" else 0
        x = rng.standard_normal((size, 8))
        t_prev = rng.standard_normal(8)
        pdict = branch_params(model, kind)
        with T.no_grad():
            h_all, h_t, s, t = model.branch_forward(
                kind, LocalArea(x, target_pos, kind), Tensor(t_prev.reshape(1, -1)))
        want_h = oracles.straightline_attention(x, pdict, clip=model.cfg.window)
        want_ht, want_s, want_t = oracles.straightline_branch(
            x, target_pos, t_prev, pdict, clip=model.cfg.window)
        worst = max(worst,
                    float(np.max(np.abs(h_all.data - want_h))),
                    float(np.max(np.abs(h_t.data.reshape(-1) - want_ht))),
                    float(np.max(np.abs(s.data.reshape(-1) - want_s))),
                    float(np.max(np.abs(t.data.reshape(-1) - want_t))))
    assert worst < 1e-10, f"max deviation {worst}"


def test_singleton_area_with_zero_params_yields_output_bias():
    model = ContextModel(small_config())
    for p in model.parameters():
        p.data[...] = 0.0
    b2 = model.named_parameters()["branch.c.ffn.b2"]
    b2.data[...] = np.arange(8, dtype=np.float64) * 0.5
    x = np.random.default_rng(0).standard_normal((1, 8))
    with T.no_grad():
        h_all, h_t, s, _t = model.branch_forward(
            "c", LocalArea(x, 0, "c"), Tensor(np.zeros((1, 8))))
    assert np.allclose(h_all.data, b2.data, atol=1e-15)
    assert np.array_equal(s.data, np.zeros((1, 8)))


def test_gate_size_two_returns_non_target_row():
    model = ContextModel(small_config())
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8))
    with T.no_grad():
        h_all, _h_t, s, _t = model.branch_forward(
            "c", LocalArea(x, 1, "c"), Tensor(np.zeros((1, 8))))
    # singleton softmax over the one non-target position has weight 1
    assert np.allclose(s.data.reshape(-1), h_all.data[0], atol=1e-15)


def test_gru_zero_everything_stays_zero():
    model = ContextModel(small_config())
    for name, p in model.named_parameters().items():
        if ".gru." in name:
            p.data[...] = 0.0
    zero = Tensor(np.zeros((1, 8)))
    with T.no_grad():
        out = model._global_track("c", Tensor(np.zeros((1, 8))), zero)
    assert np.array_equal(out.data, np.zeros((1, 8)))


def test_gru_saturated_update_gate_carries_previous_state():
    model = ContextModel(small_config())
    P = model.named_parameters()
    for name, p in P.items():
        if ".gru." in name:
            p.data[...] = 0.0
    P["branch.c.gru.bz"].data[...] = 50.0  # z ~ 1
    t_prev = np.random.default_rng(2).standard_normal((1, 8))
    with T.no_grad():
        out = model._global_track("c", Tensor(np.zeros((1, 8))), Tensor(t_prev))
    assert np.allclose(out.data, t_prev, atol=1e-12)


# ---------------------------------------------------------------------------
# conversation forward

def random_inputs(rng, n, cfg):
    emb = rng.standard_normal((n, cfg.d_m))
    fut = rng.standard_normal((n, cfg.n_futures, cfg.d_m))
    return emb, fut


def test_single_utterance_conversation_is_well_defined():
    cfg = small_config(contexts=("c", "s"))
    model = ContextModel(cfg)
    conv = make_conv(["A"])
    emb = np.random.default_rng(3).standard_normal((1, 8))
    with T.no_grad():
        out = model.forward_conversation(conv, emb, None)
    assert out.shape == (1, 4)
    assert np.all(np.isfinite(out.data))


def test_zeroed_classifier_gives_uniform_loss():
    cfg = small_config()
    model = ContextModel(cfg)
    P = model.named_parameters()
    P["classifier.wm"].data[...] = 0.0
    P["classifier.bm"].data[...] = 0.0
    conv = make_conv(["A", "B", "A"])
    rng = np.random.default_rng(4)
    emb, fut = random_inputs(rng, 3, cfg)
    with T.no_grad():
        log_probs = model.forward_conversation(conv, emb, fut)
        loss = T.nll_loss(log_probs, [0, 1, 2])
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_equal_logits_predict_class_zero():
    cfg = small_config()
    model = ContextModel(cfg)
    P = model.named_parameters()
    P["classifier.wm"].data[...] = 0.0
    P["classifier.bm"].data[...] = 0.0
    conv = make_conv(["A", "B"])
    rng = np.random.default_rng(5)
    emb, fut = random_inputs(rng, 2, cfg)
    _probs, preds = model.predict_conversation(conv, emb, fut)
    assert preds == [0, 0]


def test_predictions_causal_under_truncation():
    cfg = small_config()
    model = ContextModel(cfg)
    rng = np.random.default_rng(6)
    n = 8
    speakers = [("A", "B")[int(rng.integers(0, 2))] for _ in range(n)]
    conv = make_conv(speakers)
    emb, fut = random_inputs(rng, n, cfg)
    probs_full, _ = model.predict_conversation(conv, emb, fut)
    for j in (1, 3, 5, 7):
        prefix = make_conv(speakers[:j])
        probs_prefix, _ = model.predict_conversation(prefix, emb[:j], fut[:j])
        assert np.array_equal(probs_full[:j], probs_prefix), f"prefix {j}"


def test_predictions_invariant_to_later_embedding_edits():
    cfg = small_config()
    model = ContextModel(cfg)
    rng = np.random.default_rng(7)
    conv = make_conv(["A", "B", "A", "B", "A"])
    emb, fut = random_inputs(rng, 5, cfg)
    probs1, _ = model.predict_conversation(conv, emb, fut)
    emb2 = emb.copy()
    fut2 = fut.copy()
    emb2[3:] = rng.standard_normal(emb2[3:].shape)
    fut2[3:] = rng.standard_normal(fut2[3:].shape)
    probs2, _ = model.predict_conversation(conv, emb2, fut2)
    assert np.array_equal(probs1[:3], probs2[:3])


def test_missing_futures_with_future_context_rejected():
    model = ContextModel(small_config())
    conv = make_conv(["A", "B"])
    emb = np.zeros((2, 8))
    with pytest.raises(ConsistencyError):
        with T.no_grad():
            model.forward_conversation(conv, emb, None)


def test_embedding_shape_mismatch_rejected():
    model = ContextModel(small_config(contexts=("c",)))
    conv = make_conv(["A", "B"])
    with pytest.raises(ConsistencyError):
        with T.no_grad():
            model.forward_conversation(conv, np.zeros((3, 8)), None)


def test_raw_mode_classifies_embeddings_directly():
    cfg = small_config(contexts=("raw",))
    model = ContextModel(cfg)
    assert set(model.named_parameters()) == {"classifier.wm", "classifier.bm"}
    assert model.named_parameters()["classifier.wm"].shape == (8, 4)
    conv = make_conv(["A", "B"])
    emb = np.random.default_rng(8).standard_normal((2, 8))
    with T.no_grad():
        out = model.forward_conversation(conv, emb, None)
    assert out.shape == (2, 4)


# ---------------------------------------------------------------------------
# parameter counts

def closed_form_count(cfg: ModelConfig) -> int:
    d, y = cfg.d_m, cfg.n_labels
    if cfg.is_raw:
        return d * y + y
    per_branch = 3 * d * d + d * d + (4 * d * d + 4 * d + 4 * d * d + d) \
        + d * d + 6 * d * d + 3 * d
    total = 0
    for kind in cfg.contexts:
        total += per_branch
        if cfg.pos_mode == "relative":
            tables = 2 if cfg.share_rp else 2 * cfg.n_heads
            total += tables * (2 * cfg.window + 1) * cfg.d_k
        elif cfg.pos_mode == "learned":
            capacity = (cfg.n_futures if kind == "pf" else cfg.window) + 1
            total += capacity * d
    n_ctx = len(cfg.contexts)
    n_comp = sum((cfg.use_h, cfg.use_s, cfg.use_t))
    total += n_comp * (n_ctx * d * d)
    total += n_comp * d * y + y
    return total


def test_parameter_count_matches_closed_form_for_context_subsets():
    subsets = [("c",), ("s",), ("pf",), ("c", "s"), ("c", "pf"), ("s", "pf"),
               ("c", "s", "pf"), ("raw",)]
    for contexts in subsets:
        cfg = small_config(contexts=contexts)
        model = ContextModel(cfg)
        assert model.parameter_count() == closed_form_count(cfg), contexts


def test_parameter_count_matches_closed_form_for_composition_flags():
    flag_sets = [(True, True, True), (False, True, True), (True, False, True),
                 (True, True, False), (True, False, False)]
    for use_h, use_s, use_t in flag_sets:
        cfg = small_config(use_h=use_h, use_s=use_s, use_t=use_t)
        model = ContextModel(cfg)
        assert model.parameter_count() == closed_form_count(cfg), (use_h, use_s, use_t)


def test_parameter_count_for_position_mode_variants():
    counts = {}
    for mode in ("relative", "none", "sinusoidal", "learned"):
        cfg = small_config(pos_mode=mode)
        model = ContextModel(cfg)
        counts[mode] = model.parameter_count()
        assert counts[mode] == closed_form_count(cfg), mode
    assert counts["none"] == counts["sinusoidal"]
    assert counts["relative"] != counts["none"]
    assert counts["learned"] != counts["none"]
    assert counts["learned"] != counts["relative"]


def test_shared_relative_tables_shrink_count():
    solo = ContextModel(small_config(share_rp=False)).parameter_count()
    shared = ContextModel(small_config(share_rp=True)).parameter_count()
    assert shared < solo
    assert shared == closed_form_count(small_config(share_rp=True))


def test_acceptance_configuration_count():
    cfg = small_config()  # d_m=8, n_heads=2, window=3, m=3, 4 labels
    assert ContextModel(cfg).parameter_count() == 4852
    assert closed_form_count(cfg) == 4852


# ---------------------------------------------------------------------------
# position modes forward

def test_every_position_mode_runs_forward():
    conv = make_conv(["A", "B", "A", "B"])
    rng = np.random.default_rng(9)
    for mode in ("relative", "none", "sinusoidal", "learned"):
        cfg = small_config(pos_mode=mode)
        model = ContextModel(cfg)
        emb, fut = random_inputs(rng, 4, cfg)
        with T.no_grad():
            out = model.forward_conversation(conv, emb, fut)
        assert np.all(np.isfinite(out.data)), mode


def test_sinusoidal_table_values():
    table = sinusoidal_table(3, 4)
    assert table[0, 0] == pytest.approx(0.0)
    assert table[0, 1] == pytest.approx(1.0)
    assert table[1, 0] == pytest.approx(math.sin(1.0))
    assert table[1, 1] == pytest.approx(math.cos(1.0))
    assert table[2, 2] == pytest.approx(math.sin(2.0 / 100.0))


def test_none_and_sinusoidal_differ_in_outputs_not_counts():
    conv = make_conv(["A", "B", "A"])
    rng = np.random.default_rng(10)
    emb = rng.standard_normal((3, 8))
    fut = rng.standard_normal((3, 3, 8))
    m_none = ContextModel(small_config(pos_mode="none"))
    m_sin = ContextModel(small_config(pos_mode="sinusoidal"))
    p1, _ = m_none.predict_conversation(conv, emb, fut)
    p2, _ = m_sin.predict_conversation(conv, emb, fut)
    assert not np.array_equal(p1, p2)


# ---------------------------------------------------------------------------
# determinism

def test_same_seed_same_parameters():
    a = ContextModel(small_config(seed=5))
    b = ContextModel(small_config(seed=5))
    for (n1, p1), (n2, p2) in zip(a.named_parameters().items(),
                                  b.named_parameters().items()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)
    c = ContextModel(small_config(seed=6))
    assert not np.array_equal(a.named_parameters()["classifier.wm"].data,
                              c.named_parameters()["classifier.wm"].data)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_restores_everything(tmp_path):
    cfg = small_config()
    model = ContextModel(cfg)
    labels = ["ang", "joy", "neu", "sad"]
    path = str(tmp_path / "model.erck")
    save_checkpoint(path, model, labels, {"train.lr": "3e-05"})
    loaded, got_labels, got_cfg = load_checkpoint(path)
    assert got_labels == labels
    assert got_cfg["train.lr"] == "3e-05"
    assert got_cfg["model.d_m"] == "8"
    assert loaded.cfg.contexts == cfg.contexts
    for name, p in model.named_parameters().items():
        stored = loaded.named_parameters()[name]
        assert np.array_equal(stored.data,
                              p.data.astype(np.float32).astype(np.float64))


def test_checkpoint_predictions_bitwise_stable(tmp_path):
    cfg = small_config()
    model = ContextModel(cfg)
    conv = make_conv(["A", "B", "A", "B", "A"])
    rng = np.random.default_rng(11)
    emb, fut = random_inputs(rng, 5, cfg)
    with model.published_precision():
        before, _ = model.predict_conversation(conv, emb, fut)
    path = str(tmp_path / "model.erck")
    save_checkpoint(path, model, ["a", "b", "c", "d"])
    loaded, _, _ = load_checkpoint(path)
    with loaded.published_precision():
        after, _ = loaded.predict_conversation(conv, emb, fut)
    assert np.array_equal(before, after)


def test_checkpoint_file_roundtrip_bitwise(tmp_path):
    model = ContextModel(small_config())
    p1 = str(tmp_path / "a.erck")
    p2 = str(tmp_path / "b.erck")
    save_checkpoint(p1, model, ["w", "x", "y", "z"])
    loaded, labels, cfg = load_checkpoint(p1)
    save_checkpoint(p2, loaded, labels,
                    {k: v for k, v in cfg.items()
                     if k not in loaded.cfg.to_config_dict()})
    assert (tmp_path / "a.erck").read_bytes() == (tmp_path / "b.erck").read_bytes()


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    model = ContextModel(small_config())
    path = str(tmp_path / "a.erck")
    save_checkpoint(path, model, ["a", "b", "c", "d"])
    blob = (tmp_path / "a.erck").read_bytes()
    (tmp_path / "bad.erck").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(str(tmp_path / "bad.erck"))
    (tmp_path / "cut.erck").write_bytes(blob[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(str(tmp_path / "cut.erck"))


def test_checkpoint_label_count_must_match_model(tmp_path):
    model = ContextModel(small_config())
    with pytest.raises(ConsistencyError):
        save_checkpoint(str(tmp_path / "a.erck"), model, ["only", "three", "labels"])
