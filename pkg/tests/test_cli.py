import hashlib
from pathlib import Path

import numpy as np
import pytest

from recapprox.cli import RunConfig, build_config, evaluate_predictions, main, parse_config_text
from recapprox.core import ClassMask, encode_pnm, read_mask
from recapprox.data import load_dataset
from recapprox.model import forward, load_checkpoint, predict_mask

from oracles import replay_update

TINY = ["--size", "32", "--instances", "1,2", "--radius", "5,7",
        "--train-count", "4", "--val-count", "0", "--test-count", "2", "--ratio-strong", "0.5"]
TINY_NET = ["--levels", "2", "--base-channels", "4", "--multitask-blocks", "1",
            "--crop-size", "16", "--batch-size", "2"]


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(root.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", *TINY, "--data-dir", str(data)]) == 0
    out = root / "run"
    assert main(["train", *TINY, *TINY_NET, "--data-dir", str(data), "--out-dir", str(out),
                 "--steps", "3", "--outer-iterations", "2"]) == 0
    return root


def test_default_config_counts(tmp_path, capsys):
    assert main(["gen-data", "--data-dir", str(tmp_path)]) == 0
    counts = [len(load_dataset(tmp_path / s)) for s in ("train", "val", "test")]
    assert counts == [40, 10, 20]
    assert "task 1: 4" in capsys.readouterr().out


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", *TINY, "--seed", "7", "--data-dir", str(tmp_path / name)]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_invalid_ratio_exits_with_config_error(tmp_path, capsys):
    assert main(["gen-data", "--ratio-strong", "1.5", "--data-dir", str(tmp_path)]) == 2
    assert "ratio_strong" in capsys.readouterr().err


def test_unknown_key_is_fatal(capsys):
    assert main(["gen-data", "--no-such-key", "1"]) == 2
    assert "no_such_key" in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path):
    text = "# comment\nsteps = 5\nbeta-train = 0.5  # inline\n"
    values = parse_config_text(text)
    cfg = build_config(values, {"steps": "7"})
    assert cfg.steps == 7 and cfg.beta_train == 0.5
    assert build_config({"flip": "false"}, {}).flip is False
    assert build_config({}, {"alphas": "1,0.5,2"}).alphas == (1.0, 0.5, 2.0)
    # a written config reads back to the same values
    cfg = RunConfig(steps=3, flip=False, radius=(4.0, 6.0))
    assert build_config(parse_config_text(cfg.as_text()), {}) == cfg
    path = tmp_path / "c.txt"
    path.write_text("ratio_strong = 2\n")
    assert main(["gen-data", "--config", str(path)]) == 2


def test_train_outputs(workspace):
    out = workspace / "run"
    rows = (out / "history.csv").read_text().splitlines()
    assert rows[0] == "# recapprox history v1" and len(rows) == 4
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["ckpt_k01.bin", "ckpt_k02.bin", "final.bin"]
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == ["k00", "k01", "k02"]
    assert (out / "curve.csv").read_text().startswith("k,mean_task2_dice_vs_gt\n0,")


def test_train_single_iteration_without_steps(tmp_path, workspace):
    out = tmp_path / "r"
    assert main(["train", *TINY_NET, "--data-dir", str(workspace / "data"), "--out-dir", str(out),
                 "--outer-iterations", "1", "--steps", "0"]) == 0
    assert len((out / "history.csv").read_text().splitlines()) == 3


def test_train_beta_zero_keeps_snapshots(tmp_path, workspace):
    out = tmp_path / "r"
    assert main(["train", *TINY_NET, "--data-dir", str(workspace / "data"), "--out-dir", str(out),
                 "--outer-iterations", "2", "--steps", "2", "--beta-train", "0"]) == 0
    assert tree_digest(out / "snapshots" / "k00") == tree_digest(out / "snapshots" / "k02")


def test_train_is_reproducible(tmp_path, workspace):
    out = tmp_path / "again"
    assert main(["train", *TINY, *TINY_NET, "--data-dir", str(workspace / "data"), "--out-dir", str(out),
                 "--steps", "3", "--outer-iterations", "2"]) == 0
    ref = workspace / "run"
    assert (out / "history.csv").read_bytes() == (ref / "history.csv").read_bytes()
    assert tree_digest(out / "snapshots") == tree_digest(ref / "snapshots")
    assert (out / "checkpoints" / "final.bin").read_bytes() == (ref / "checkpoints" / "final.bin").read_bytes()


def test_train_missing_dataset(tmp_path, capsys):
    assert main(["train", "--data-dir", str(tmp_path / "none")]) == 3
    assert "manifest" in capsys.readouterr().err


# --- evolve -----------------------------------------------------------------


def _write(path, labels):
    path.write_bytes(encode_pnm(np.asarray(labels, np.uint8)))
    return str(path)


def test_evolve_beta_zero_is_byte_identical(tmp_path):
    seed = np.full((12, 12), 2, np.uint8)
    seed[3:6, 3:6] = 0
    pred = np.full((12, 12), 2, np.uint8)
    pred[2:9, 2:9] = 0
    s, p = _write(tmp_path / "s.pgm", seed), _write(tmp_path / "p.pgm", pred)
    out = tmp_path / "o.pgm"
    assert main(["evolve", "--seed-mask", s, "--prediction", p, "--beta", "0", "--output", str(out)]) == 0
    assert out.read_bytes() == Path(s).read_bytes()
    assert main(["evolve", "--seed-mask", s, "--prediction", p, "--beta", "1e6", "--output", str(out)]) == 0
    assert out.read_bytes() == Path(p).read_bytes()


def test_evolve_matches_oracle_fixture(tmp_path, capsys):
    seeds = np.full((16, 16), 2, np.uint8)
    seeds[3:5, 3:5] = 0
    seeds[3:5, 9:11] = 0
    seeds[11:13, 5:7] = 1
    pred = np.full((16, 16), 2, np.uint8)
    pred[1:7, 1:13] = 0
    pred[9:15, 3:9] = 1
    pred[14, 14] = 0
    s, p = _write(tmp_path / "s.pgm", seeds), _write(tmp_path / "p.pgm", pred)
    out = tmp_path / "o.pgm"
    assert main(["evolve", "--seed-mask", s, "--prediction", p, "--beta", "1", "--output", str(out)]) == 0
    np.testing.assert_array_equal(read_mask(out, 3).labels, replay_update(seeds, pred, 3, 1.0))
    assert "instances before: 3, after: 3" in capsys.readouterr().out


def test_evolve_errors(tmp_path):
    s = _write(tmp_path / "s.pgm", np.zeros((4, 4)))
    p = _write(tmp_path / "p.pgm", np.zeros((4, 5)))
    assert main(["evolve", "--seed-mask", s, "--prediction", p, "--output", str(tmp_path / "o.pgm")]) == 3
    assert main(["evolve", "--seed-mask", s, "--prediction", str(tmp_path / "x.pgm"),
                 "--output", str(tmp_path / "o.pgm")]) == 3
    assert main(["evolve", "--seed-mask", s]) == 2


# --- eval and infer ---------------------------------------------------------


def test_eval_writes_reports(workspace, capsys):
    out = workspace / "run"
    assert main(["eval", "--data-dir", str(workspace / "data"), "--out-dir", str(out)]) == 0
    rows = (out / "eval_test_final.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 + 1 and rows[-1].startswith("mean,")
    assert "mean dice" in capsys.readouterr().out
    assert main(["eval", "--data-dir", str(workspace / "data"), "--out-dir", str(out),
                 "--checkpoint", str(workspace / "nothing.bin")]) == 3


def test_eval_saturation_and_empty(workspace):
    test = load_dataset(workspace / "data" / "test")
    perfect = evaluate_predictions(test, [item.gt for item in test.items])
    assert all(r.mean_dice == 1.0 for r in perfect)
    bg = test.task_classes[1] - 1
    empty = [ClassMask(np.full(item.gt.shape, bg), item.gt.classes) for item in test.items]
    for item, r in zip(test.items, evaluate_predictions(test, empty)):
        # classes absent from both masks score 1 by convention; present ones score 0
        for c, d in enumerate(r.class_dice):
            assert d == (0.0 if (item.gt.labels == c).any() else 1.0)
        assert r.object_dice == 0.0


def test_infer_is_deterministic_and_matches_oracle(workspace, tmp_path):
    image = workspace / "data" / "test" / "images" / "0000.pgm"
    ckpt = workspace / "run" / "checkpoints" / "final.bin"
    outs = []
    for name in ("a.pgm", "b.pgm"):
        assert main(["infer", "--checkpoint", str(ckpt), "--image", str(image), "--output", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    net = load_checkpoint(ckpt)
    item = load_dataset(workspace / "data" / "test").items[0]
    probs = forward(net, item.image)
    coarse, seg = predict_mask(probs, 2), predict_mask(probs, 1)
    golden = replay_update(coarse.labels, seg.labels, coarse.classes, 100.0)
    np.testing.assert_array_equal(read_mask(tmp_path / "a.pgm", 3).labels, golden)
    assert main(["infer", "--checkpoint", str(ckpt), "--image", str(image), "--beta-final", "0",
                 "--beta-train", "0", "--output", str(tmp_path / "c.pgm")]) == 0
    assert read_mask(tmp_path / "c.pgm", 3) == coarse


def test_infer_rejects_indivisible_image(workspace, tmp_path):
    _write(tmp_path / "odd.pgm", np.zeros((31, 32)))
    ckpt = workspace / "run" / "checkpoints" / "final.bin"
    assert main(["infer", "--checkpoint", str(ckpt), "--image", str(tmp_path / "odd.pgm"),
                 "--output", str(tmp_path / "o.pgm")]) == 3
