import numpy as np
import pytest

from ctsd.corpus import build_vocab, encode_pairs, gen_synthetic
from ctsd.decoding import DecodeConfig
from ctsd.experiments import COMPARE_COLUMNS, compare
from ctsd.metrics import REPORT_COLUMNS
from ctsd.model import ConfigError, ModelConfig, init_params
from ctsd.objectives import LossConfig
from ctsd.trainer import (
    SWEEP_COLUMNS,
    Trainer,
    TrainConfig,
    TrainingError,
    batch_schedule,
    evaluate,
    log_csv,
    sweep,
    token_accuracy,
    train,
)

PAIRS = gen_synthetic(0, 24)
VOCAB = build_vocab(PAIRS, 128)


def mcfg(seed=0, **kw):
    base = dict(vocab_size=128, d_model=16, n_heads=2, n_layers=1, max_len=40, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


def flat(params):
    return np.concatenate([t.values.ravel() for t in params.parameters()])


def test_config_validation():
    for bad, field in [({"batch_size": 0}, "batch_size"), ({"learning_rate": 0.0}, "learning_rate"), ({"momentum": 1.0}, "momentum"), ({"clip_norm": -1.0}, "clip_norm")]:
        with pytest.raises(ConfigError) as exc:
            TrainConfig(**bad).validate()
        assert exc.value.field == field
    with pytest.raises(ConfigError):
        TrainConfig(loss=LossConfig(W=-1.0)).validate()


def test_batch_schedule_covers_each_epoch():
    sched = batch_schedule(10, 4, seed=3, epochs=2)
    assert [len(b) for b in sched] == [4, 4, 2, 4, 4, 2]
    for e in range(2):
        assert sorted(np.concatenate(sched[3 * e : 3 * e + 3]).tolist()) == list(range(10))
    assert all(np.array_equal(a, b) for a, b in zip(sched, batch_schedule(10, 4, 3, 2)))


def test_w_zero_ctsd_matches_ce_bit_for_bit():
    tc = TrainConfig(learning_rate=0.03, epochs=2, batch_size=8)
    p_ce, log_ce = train(mcfg(), tc, PAIRS, VOCAB)
    tz = TrainConfig(loss=LossConfig(kind="CTSD", W=0.0), learning_rate=0.03, epochs=2, batch_size=8)
    p_z, log_z = train(mcfg(), tz, PAIRS, VOCAB)
    assert np.array_equal(flat(p_ce), flat(p_z))
    assert [e["total"] for e in log_ce] == [e["total"] for e in log_z]


def test_loss_decreases_on_small_corpus():
    _, log = train(mcfg(), TrainConfig(epochs=50), PAIRS[:10], VOCAB)
    loss = np.array([e["total"] for e in log[:50]])
    ma = np.convolve(loss, np.ones(5) / 5, "valid")
    assert (np.diff(ma) < 0).all()


def test_single_pair_overfit():
    _, log = train(mcfg(), TrainConfig(learning_rate=0.03, epochs=500), PAIRS[:1], VOCAB)
    assert min(e["ce_loss"] for e in log) < 0.01


@pytest.mark.parametrize("kind", ["UL_T", "CL", "CT", "CTSD"])
def test_component_accounting(kind):
    tc = TrainConfig(loss=LossConfig(kind=kind, W=0.7), learning_rate=0.03, epochs=1, batch_size=8)
    _, log = train(mcfg(), tc, PAIRS, VOCAB)
    for e in log:
        assert abs(e["total"] - (e["ce_loss"] + 0.7 * e["aux_loss"])) < 1e-9


def test_deterministic():
    tc = TrainConfig(loss=LossConfig(kind="CTSD", W=1.0), learning_rate=0.03, epochs=1, batch_size=8)
    a, la = train(mcfg(), tc, PAIRS, VOCAB)
    b, lb = train(mcfg(), tc, PAIRS, VOCAB)
    assert np.array_equal(flat(a), flat(b)) and la == lb


def test_resume_reproduces_trajectory(tmp_path):
    src, tgt = encode_pairs(VOCAB, PAIRS)
    tc = TrainConfig(loss=LossConfig(kind="CTSD", W=1.0), learning_rate=0.03, epochs=2, batch_size=8)
    full = Trainer(init_params(mcfg()), tc, src, tgt, VOCAB)
    full.run()
    part = Trainer(init_params(mcfg()), tc, src, tgt, VOCAB)
    part.run(until=4)
    part.save(tmp_path / "mid.ckpt")
    resumed = Trainer.load(tmp_path / "mid.ckpt", src, tgt)
    assert resumed.step == 4 and resumed.vocab.id_to_token == VOCAB.id_to_token
    resumed.run()
    assert np.array_equal(flat(full.params), flat(resumed.params))
    assert full.log == resumed.log


def test_nan_loss_aborts_with_step_and_batch():
    src, tgt = encode_pairs(VOCAB, PAIRS)
    params = init_params(mcfg())
    params["tok_emb"].values[:] = np.nan
    tr = Trainer(params, TrainConfig(batch_size=4), src, tgt)
    with pytest.raises(TrainingError, match=r"step 0 \(batch ids \["):
        tr.run()


def test_clip_norm_bounds_first_update():
    src, tgt = encode_pairs(VOCAB, PAIRS)
    params = init_params(mcfg())
    before = flat(params)
    Trainer(params, TrainConfig(learning_rate=1.0, clip_norm=0.5, batch_size=8), src, tgt).run(until=1)
    assert np.linalg.norm(flat(params) - before) <= 0.5 + 1e-12


def test_train_from_init_copies():
    tc = TrainConfig(learning_rate=0.03, epochs=1, batch_size=8)
    base = init_params(mcfg(seed=5))
    snap = flat(base)
    p, _ = train(mcfg(seed=5), tc, PAIRS, VOCAB, init=base)
    assert np.array_equal(flat(base), snap)
    q, _ = train(mcfg(seed=5), tc, PAIRS, VOCAB)
    assert np.array_equal(flat(p), flat(q))
    with pytest.raises(ValueError):
        train(mcfg(seed=6), tc, PAIRS, VOCAB, init=base)


def test_vocab_too_large():
    with pytest.raises(ConfigError):
        train(mcfg(vocab_size=8), TrainConfig(), PAIRS, VOCAB)


def test_log_csv():
    text = log_csv([{"step": 0, "ce_loss": 1.5, "aux_loss": 0.25, "total": 1.75}])
    assert text == "step,ce_loss,aux_loss,total\n0,1.5,0.25,1.75\n"


def test_token_accuracy_range():
    acc = token_accuracy(init_params(mcfg()), VOCAB, PAIRS[:5])
    assert 0.0 <= acc <= 1.0


def test_sweep_single_cell_equals_direct_run():
    tc = TrainConfig(loss=LossConfig(kind="CTSD", W=1.0, N=4, T=2.0), learning_rate=0.03, epochs=1, batch_size=8)
    dc = DecodeConfig(max_new_tokens=12)
    cells = sweep({"W": [1.0], "N": [4], "T": [2.0]}, mcfg(), tc, PAIRS[:16], PAIRS[16:], dc, VOCAB)
    params, _ = train(mcfg(), tc, PAIRS[:16], VOCAB)
    report, _ = evaluate(params, VOCAB, PAIRS[16:], dc)
    assert len(cells) == 1 and cells[0].report.as_dict() == report.as_dict()
    assert cells[0].row()[:3] == [1.0, 4, 2.0]


def test_sweep_w_zero_row_equals_ce():
    tc = TrainConfig(learning_rate=0.03, epochs=1, batch_size=8)
    dc = DecodeConfig(max_new_tokens=12)
    cells = sweep({"W": [0.0, 1.0], "N": [4], "T": [2.0]}, mcfg(), tc, PAIRS[:16], PAIRS[16:], dc, VOCAB)
    params, _ = train(mcfg(), tc, PAIRS[:16], VOCAB)
    report, _ = evaluate(params, VOCAB, PAIRS[16:], dc)
    assert cells[0].report.as_dict() == report.as_dict()
    assert cells[1].report is not None


def test_sweep_records_failed_cell():
    tc = TrainConfig(learning_rate=0.03, epochs=1, batch_size=8)
    cells = sweep({"W": [1.0], "N": [0], "T": [2.0]}, mcfg(), tc, PAIRS[:8], PAIRS[8:10], DecodeConfig(max_new_tokens=4), VOCAB)
    assert cells[0].report is None and "N" in cells[0].error
    assert cells[0].row()[3].startswith("error:")


def test_sweep_header():
    assert SWEEP_COLUMNS[:3] == ["Weight", "PredToken", "T"]
    assert SWEEP_COLUMNS[3:] == REPORT_COLUMNS


def test_compare_layout_and_pretrain():
    tc = TrainConfig(loss=LossConfig(W=1.0, N=4, T=2.0), learning_rate=0.03, epochs=1, batch_size=8)
    dc = DecodeConfig(max_new_tokens=10)
    pre = TrainConfig(learning_rate=0.03, epochs=1, batch_size=8)
    res = compare(mcfg(), tc, PAIRS[:16], PAIRS[16:], ["CTSD", "CE"], dc, VOCAB, decode_baselines=["PS"], pretrain=pre)
    assert COMPARE_COLUMNS[:3] == ["Dataset", "Model", "Method"]
    methods = [r[2] for r in res.rows]
    datasets = [r[0] for r in res.rows]
    assert methods[:3] == ["CE", "CE+PS", "CTSD"]
    assert datasets == ["stacked"] * 3 + ["clean"] * 3 + ["all"] * 3
    assert res.rows[0][1] == "enc-dec-d16-L1"
    assert "pretrain" in res.logs and len(res.logs["CE"]) == len(res.logs["CTSD"])
    with pytest.raises(ValueError):
        compare(mcfg(), tc, PAIRS[:16], PAIRS[16:], ["CTSD"], dc, VOCAB, decode_baselines=["PS"])
    with pytest.raises(ValueError):
        compare(mcfg(), tc, PAIRS[:16], PAIRS[16:], ["XE"], dc, VOCAB)
