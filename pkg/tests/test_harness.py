import csv
import io
import json
from types import SimpleNamespace

import numpy as np
import pytest

from metass import autograd as ag
from metass import cli
from metass import harness as hz
from metass import metalearn as ml
from metass.tasnet import ModelParams, Partition, init_params, load_checkpoint, partition_tensors
from metass.taskgen import SpeakerPool, generate_tasks, synth_speakers

TINY = "tiny"


@pytest.fixture(scope="module")
def desk():
    return hz.make_desk_tasks(seed=0, n_train=3, n_dev=2, n_test=3, duration_s=0.02)


@pytest.fixture(scope="module")
def tiny_params():
    return init_params(hz.MODEL_PRESETS[TINY](), 0)


def cfg(**kw):
    base = dict(model=TINY, epochs=1, seed=0)
    base.update(kw)
    return hz.ExperimentConfig(**base)


# config


def test_algo_fixes_meta_partition():
    assert cfg(algo="maml").meta_partition is Partition.WHOLE_MODEL
    assert cfg(algo="anil_s").meta_partition is Partition.SEPARATOR_ONLY
    assert cfg(algo="anil_c").meta_partition is Partition.AUTOENCODER_ONLY
    with pytest.raises(ValueError):
        cfg(algo="multitask").meta_partition


@pytest.mark.parametrize("bad", [{"mode": "train"}, {"algo": "reptile"}, {"finetune_regime": "x"}, {"epochs": -1}])
def test_config_rejects_bad_values(bad):
    with pytest.raises(ValueError):
        cfg(**bad)


def test_config_files(tmp_path):
    y = tmp_path / "c.yaml"
    y.write_text("mode: meta_train\nalgo: anil_s\nbeta: 0.001\ntest_manifests: a.jsonl\n")
    c = hz.ExperimentConfig.from_file(y)
    assert (c.algo, c.beta, c.test_manifests) == ("anil_s", 0.001, ["a.jsonl"])
    j = tmp_path / "c.json"
    j.write_text(json.dumps(c.to_dict()))
    assert hz.ExperimentConfig.from_file(j) == c
    j.write_text(json.dumps({"learning_rate": 1}))
    with pytest.raises(ValueError, match="unknown"):
        hz.ExperimentConfig.from_file(j)


# pretraining


def test_pretrain_zero_epochs_is_init(desk):
    res = hz.run_pretrain(cfg(epochs=0), desk.train, desk.dev)
    init = init_params(hz.MODEL_PRESETS[TINY](), 0)
    assert res.best.identical(init) and res.half.identical(init) and res.last.identical(init)
    assert res.initial_train_loss == res.final_train_loss


def test_pretrain_history_is_deterministic(desk, tmp_path):
    a = hz.run_pretrain(cfg(epochs=2), desk.train, desk.dev)
    b = hz.run_pretrain(cfg(epochs=2), desk.train, desk.dev)
    hz.write_loss_csv(a.history, tmp_path / "a.csv")
    hz.write_loss_csv(b.history, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert [r["split"] for r in rows[:2]] == ["train", "dev"]
    assert {int(r["epoch"]) for r in rows} == {0, 1, 2}


def test_pretrain_200_steps_reduces_loss():
    pool = SpeakerPool.synthetic(synth_speakers(4, seed=1), duration_s=0.02)
    tasks = generate_tasks(pool, seed=1)[:4]
    # 20 pooled mixtures at batch 4 -> 5 steps per epoch
    res = hz.run_pretrain(cfg(epochs=40, lr=3e-3), tasks)
    assert res.final_train_loss < res.initial_train_loss


def test_pretrain_half_checkpoint(desk):
    res = hz.run_pretrain(cfg(epochs=2, half_fraction=0.5), desk.train)
    one = hz.run_pretrain(cfg(epochs=1), desk.train)
    assert res.half.identical(one.last)


def test_pretrain_abort_names_epoch(desk, monkeypatch):
    def boom(*a, **k):
        raise ml.NonFiniteLoss("loss is nan")

    monkeypatch.setattr(ml, "multitask_step", boom)
    with pytest.raises(ml.NonFiniteLoss, match="epoch 1 step 0"):
        hz.run_pretrain(cfg(), desk.train)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        hz.load_tasks(tmp_path / "nope.jsonl", "train")


# meta-training


def probe_loss(params, targets):
    theta = ag.as_tensor(params["separator.theta"])
    total = theta * 0.0
    for t in targets:
        total = total + (theta - t) ** 2 * 0.5
    return total * (1.0 / len(targets))


def test_meta_train_probe_closed_form():
    init = ModelParams(None, {"separator.theta": np.array(0.0)})
    tasks = [SimpleNamespace(support=[1.0], query=[1.0])]
    res = hz.run_meta_train(cfg(algo="maml", alpha=0.1, beta=0.05, batch_size=1), tasks, init=init, loss_fn=probe_loss)
    # theta - beta * (theta' - t) with theta' = 0.1
    assert res.last["separator.theta"] == pytest.approx(0.05 * 0.9, rel=1e-14)
    assert res.history == [(1, "train", pytest.approx(0.5 * 0.9**2, rel=1e-14))]


def test_meta_train_deterministic_checkpoint(desk, tmp_path):
    c = cfg(algo="maml", beta=1e-3)
    a = hz.run_meta_train(c, desk.train, desk.dev)
    b = hz.run_meta_train(c, desk.train, desk.dev)
    hz.save_params(a.best, tmp_path / "a.ckpt", c)
    hz.save_params(b.best, tmp_path / "b.ckpt", c)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_meta_train_zero_epochs_returns_init(desk, tiny_params):
    res = hz.run_meta_train(cfg(algo="maml", epochs=0), desk.train, init=tiny_params)
    assert res.best is tiny_params


def test_anil_s_outer_step_moves_autoencoder(desk, tiny_params):
    res = hz.run_meta_train(cfg(algo="anil_s", beta=1e-2), desk.train, init=tiny_params)
    assert not res.last.identical(tiny_params, tiny_params.group("encoder"))


def test_anil_spot_check_catches_leaky_inner_loop(desk, tiny_params, monkeypatch):
    real = ml.inner_adapt

    def leaky(params, support, mcfg, loss_fn=ml.separation_loss):
        out = real(params, support, mcfg.with_(partition="m"), loss_fn)
        return out

    monkeypatch.setattr(ml, "inner_adapt", leaky)
    with pytest.raises(AssertionError, match="outside partition"):
        hz.run_meta_train(cfg(algo="anil_s"), desk.train, init=tiny_params)


# evaluation


def test_alpha_zero_post_equals_pre(desk, tiny_params):
    rep = hz.run_adapt_eval(tiny_params, desk.test, "m", 0.0)
    assert all(r.post == r.pre for r in rep.records)


def test_mixture_passthrough_scores_zero(desk, tiny_params, monkeypatch):
    monkeypatch.setattr(hz, "forward", lambda p, mix: ag.Tensor(np.stack([mix, mix], axis=-2)))
    rep = hz.run_adapt_eval(tiny_params, desk.test, "none")
    assert all(r.pre == 0.0 for r in rep.records)


def test_row_count_matches_91_task_pool(tiny_params):
    pool = SpeakerPool.synthetic(synth_speakers(14, seed=3), duration_s=0.01)
    tasks = generate_tasks(pool, seed=3, role="test")
    rep = hz.run_adapt_eval(tiny_params, tasks, "none")
    assert len(rep) == 91


@pytest.mark.parametrize("regime", hz.REGIMES)
def test_regime_wiring_is_bit_exact(desk, tiny_params, regime, monkeypatch):
    seen = []
    real = hz.query_score
    monkeypatch.setattr(hz, "query_score", lambda p, t: seen.append(p) or real(p, t))
    hz.run_adapt_eval(tiny_params, desk.test[:1], regime, 0.05)
    adapted = seen[-1]
    moved = set(partition_tensors(tiny_params, regime))
    assert adapted.identical(tiny_params, set(tiny_params) - moved)
    assert not adapted.identical(tiny_params, moved)


def test_pre_scores_agree_across_regimes(desk, tiny_params):
    pres = [[r.pre for r in hz.run_adapt_eval(tiny_params, desk.test, g).records] for g in (*hz.REGIMES, "none")]
    assert all(p == pres[0] for p in pres)


def test_threaded_eval_matches_serial(desk, tiny_params):
    a = hz.run_adapt_eval(tiny_params, desk.test, "m", 0.01, workers=1)
    b = hz.run_adapt_eval(tiny_params, desk.test, "m", 0.01, workers=3)
    assert a.records == b.records


def test_eval_refuses_multi_shot_tasks(desk, tiny_params):
    t = desk.test[0]
    bad = SimpleNamespace(task_id="x", support=t.support * 2, query=t.query)
    with pytest.raises(ValueError, match="one-shot"):
        hz.run_adapt_eval(tiny_params, [bad])


def test_report_csv_round_trip_and_aggregates(desk, tiny_params):
    rep = hz.run_adapt_eval(tiny_params, desk.test, "a_s", 0.01)
    back = hz.AdaptationReport.from_csv(rep.to_csv())
    assert back.records == rep.records
    assert rep.mean_post == float(np.mean([r.post for r in back.records]))
    assert rep.mean_delta == pytest.approx(rep.mean_post - rep.mean_pre, abs=1e-12)


# sweep


@pytest.fixture(scope="module")
def sweep(desk, tiny_params):
    return hz.run_lr_sweep(tiny_params, desk.test)


def test_sweep_has_thirty_rows(sweep):
    assert len(sweep.rows) == 30
    for regime in hz.REGIMES:
        assert [r[1] for r in sweep.rows if r[0] == regime] == list(hz.ALPHA_GRID)


def test_sweep_mean_equals_report_mean(sweep):
    for regime, alpha, mean, std in sweep.rows:
        assert mean == sweep.reports[(regime, alpha)].mean_post
        assert std == sweep.reports[(regime, alpha)].std_post


def test_sweep_negligible_step(sweep):
    for regime in hz.REGIMES:
        rep = sweep.reports[(regime, 1e-6)]
        assert abs(rep.mean_post - rep.mean_pre) < 0.1


def test_sweep_csv(sweep):
    rows = list(csv.DictReader(io.StringIO(sweep.to_csv())))
    assert list(rows[0]) == ["regime", "alpha", "mean_sisnri", "std"]
    assert float(rows[0]["mean_sisnri"]) == sweep.rows[0][2]


# report emission


def test_single_report_one_row(desk, tiny_params):
    rep = hz.run_adapt_eval(tiny_params, desk.test, "m", 0.01, meta={"method": "maml", "pretrain": "best", "column": "synth"})
    text, table_csv, table_json = hz.emit_report([rep])
    assert len(text.strip().splitlines()) == 2
    assert len(json.loads(table_json)) == 1
    assert table_csv.splitlines()[0] == "method,p.t.,f.t.,synth"


def test_table_round_trip_two_decimals():
    rows = [
        hz.TableRow("multitask", "best", "m", {"libri": 8.804, "vctk": 4.9}),
        hz.TableRow("maml", "half", "m", {"libri": 9.546, "vctk": -7.941}),
    ]
    text, _, _ = hz.emit_report(rows)
    back = hz.parse_table(text)
    assert [r.key for r in back] == [r.key for r in rows]
    for a, b in zip(rows, back):
        for c in a.values:
            assert round(a.values[c], 2) == b.values[c]
    assert hz.emit_report(rows)[0] == text


def test_published_reference_column():
    text, table_csv, table_json = hz.emit_report([hz.TableRow("maml", "best", "m", {"synth": 1.0})], published_column="libri")
    assert "9.84" in text
    assert json.loads(table_json)[0]["published"] == {"libri": 9.84}
    assert hz.parse_table(text)[0].values == {"synth": 1.0}


def test_reports_group_into_rows(desk, tiny_params):
    reps = [
        hz.run_adapt_eval(tiny_params, desk.test, "none", meta={"method": "multitask", "pretrain": "best", "column": c})
        for c in ("clean", "noisy")
    ]
    rows = hz.rows_from_reports(reps)
    assert len(rows) == 1 and rows[0].key == ("multitask", "best", "-") and set(rows[0].values) == {"clean", "noisy"}


def test_emit_report_needs_input():
    with pytest.raises(ValueError):
        hz.emit_report([])


# CLI


def test_cli_end_to_end(tmp_path, monkeypatch):
    monkeypatch.setenv("METASS_DATA_ROOT", str(tmp_path))
    data = tmp_path / "data"
    base = ["--seed", "0", "--model", TINY]
    assert cli.main(["make-tasks", *base, "--out-dir", str(data), "--train-speakers", "3", "--dev-speakers", "2",
                     "--test-speakers", "3", "--duration", "0.02", "--noise"]) == 0
    assert {p.name for p in data.glob("*.jsonl")} == {"train.jsonl", "dev.jsonl", "test.jsonl", "test_noisy.jsonl"}

    # relative paths resolve against the data root
    man = ["--train-manifest", "data/train.jsonl", "--dev-manifest", "data/dev.jsonl"]
    pre = tmp_path / "pre"
    assert cli.main(["pretrain", *base, *man, "--epochs", "1", "--out-dir", str(pre)]) == 0
    assert (pre / "best.ckpt").exists() and (pre / "half.ckpt").exists() and (pre / "loss.csv").exists()
    header = json.loads((pre / "run.json").read_text())
    assert header["flags"]["epochs"] == 1 and header["config"]["mode"] == "pretrain"

    meta = tmp_path / "meta"
    assert cli.main(["meta-train", *base, *man, "--algo", "anil_s", "--epochs", "1", "--beta", "1e-3",
                     "--checkpoint", str(pre / "best.ckpt"), "--out-dir", str(meta)]) == 0
    _, info = load_checkpoint(meta / "best.ckpt")
    assert info["algo"] == "anil_s" and info["config"]["algo"] == "anil_s"

    ev = tmp_path / "eval"
    tests = ["--test-manifest", "data/test.jsonl", "--test-manifest", "data/test_noisy.jsonl"]
    assert cli.main(["adapt-eval", *base, *tests, "--checkpoint", str(meta / "best.ckpt"), "--regime", "a_s",
                     "--alpha", "0.01", "--out-dir", str(ev)]) == 0
    rows = hz.parse_table((ev / "table.txt").read_text())
    assert rows[0].key == ("anil_s", "best", "a_s") and set(rows[0].values) == {"test", "test_noisy"}
    assert len(hz.AdaptationReport.from_csv((ev / "report_test.csv").read_text())) == 3

    sw = tmp_path / "sweep"
    assert cli.main(["sweep-lr", *base, "--test-manifest", "data/test.jsonl", "--checkpoint", str(pre / "best.ckpt"),
                     "--out-dir", str(sw)]) == 0
    assert len((sw / "sweep_test.csv").read_text().strip().splitlines()) == 31


def test_cli_reports_missing_manifest(tmp_path, capsys):
    assert cli.main(["pretrain", "--train-manifest", str(tmp_path / "none.jsonl"), "--out-dir", str(tmp_path)]) == 2
    assert "manifest not found" in capsys.readouterr().err


def test_cli_config_file(tmp_path):
    conf = tmp_path / "c.yaml"
    conf.write_text("beta: 0.002\nalgo: anil_c\n")
    args = cli.build_parser().parse_args(["--config", str(conf), "meta-train", "--epochs", "3"])
    c = cli.make_config(args)
    assert (c.mode, c.algo, c.beta, c.epochs) == ("meta_train", "anil_c", 0.002, 3)
