import re

import numpy as np
import pytest

from chanprune import fixture_path
from chanprune.cfg import load_cfg, save_cfg
from chanprune.cli import run_cli
from chanprune.inference import write_tensor
from chanprune.pruner import PruneConfig, prune
from chanprune.weights import load_weights, random_store, save_weights

import toynets

TINY = str(fixture_path("yolov3-tiny"))


@pytest.fixture
def toy_files(tmp_path):
    rng = np.random.default_rng(0)
    net = toynets.toy_detector(rng)
    store, dead = toynets.dead_channel_store(net, rng)
    save_cfg(net, tmp_path / "toy.cfg")
    save_weights(store, net, tmp_path / "toy.weights")
    return tmp_path, net, store, dead


def bflops(text):
    return [float(v) for v in re.findall(r"total BFLOPS: ([\d.]+)", text)]


def test_analyze(capsys):
    assert run_cli(["analyze", TINY, "--input", "416"]) == 0
    (v,) = bflops(capsys.readouterr().out)
    assert v == pytest.approx(5.46, rel=0.03)


def test_analyze_csv_and_output(tmp_path, capsys):
    assert run_cli(["analyze", TINY, "--input", "416", "608", "--csv", "-o", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("index,type") == 2
    assert (tmp_path / "yolov3-tiny.csv").read_text() == out


def test_insert_spp(tmp_path, capsys):
    assert run_cli(["insert-spp", str(fixture_path("yolov3")), "-o", str(tmp_path)]) == 0
    new = load_cfg(tmp_path / "yolov3-spp3.cfg")
    assert len(new.layers) == 126
    assert run_cli(["insert-spp", TINY]) == 3  # heads too short


def test_prune_ratio_zero_identity(toy_files, capsys):
    d, net, store, _ = toy_files
    out = d / "out"
    assert run_cli(["prune", str(d / "toy.cfg"), str(d / "toy.weights"), "--ratio", "0",
                    "-o", str(out)]) == 0
    assert (out / "toy-pruned.cfg").read_text() == (d / "toy.cfg").read_text()
    assert (out / "toy-pruned.weights").read_bytes() == (d / "toy.weights").read_bytes()
    assert (out / "toy-pruned-report.txt").exists()


def test_prune_then_verify(toy_files, capsys):
    d, net, store, dead = toy_files
    n_dead = sum(int(m.sum()) for m in dead.values())
    total = sum(m.size for m in dead.values())
    out = d / "out"
    assert run_cli(["prune", str(d / "toy.cfg"), str(d / "toy.weights"),
                    "--ratio", str(n_dead / total), "-o", str(out), "--csv"]) == 0
    assert (out / "toy-pruned-report.csv").read_text().startswith("index,kind")
    code = run_cli(["verify", str(d / "toy.cfg"), str(d / "toy.weights"),
                    str(out / "toy-pruned.cfg"), str(out / "toy-pruned.weights"),
                    "--trials", "10", "--tol", "1e-5", "--seed", "3"])
    text = capsys.readouterr().out
    assert code == 0, text
    dev = float(re.search(r"max deviation: (\S+)", text).group(1))
    assert dev <= 1e-5


def test_verify_detects_difference(toy_files, capsys):
    d, net, store, _ = toy_files
    other = store.copy()
    for w in other.layers.values():
        w.kernel *= np.float32(1.1)
    save_weights(other, net, d / "other.weights")
    code = run_cli(["verify", str(d / "toy.cfg"), str(d / "toy.weights"), str(d / "toy.cfg"),
                    str(d / "other.weights"), "--trials", "2"])
    assert code == 3
    assert "FAILED" in capsys.readouterr().out


def test_verify_with_tensor(toy_files, capsys):
    d, net, store, _ = toy_files
    write_tensor(d / "x.bin", np.zeros((3, 16, 16), np.float32))
    args = [str(d / "toy.cfg"), str(d / "toy.weights")] * 2
    assert run_cli(["verify", *args, "--tensor", str(d / "x.bin")]) == 0
    assert "trials: 1" in capsys.readouterr().out


def test_prune_preset_and_iterations(toy_files, capsys):
    d, *_ = toy_files
    assert run_cli(["prune", str(d / "toy.cfg"), str(d / "toy.weights"),
                    "--preset", "slim-50"]) == 0
    out = capsys.readouterr().out
    assert "round 1" in out and "round 2" in out


def test_infer(toy_files, capsys):
    d, net, store, _ = toy_files
    write_tensor(d / "x.bin", np.random.default_rng(0).uniform(-1, 1, (3, 16, 16)).astype(np.float32))
    assert run_cli(["infer", str(d / "toy.cfg"), str(d / "toy.weights"), str(d / "x.bin"),
                    "--conf", "0.0", "-o", str(d / "inf")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(len(l.split()) == 6 for l in lines)
    assert (d / "inf" / "head0.bin").exists()
    assert (d / "inf" / "detections.txt").read_text().splitlines() == lines


def test_eval(tmp_path, capsys):
    ann = tmp_path / "ann"
    ann.mkdir()
    (ann / "img1.txt").write_text("0,0,10,10,1,4,0,0\n20,20,10,10,1,1,0,0\n")
    (ann / "img2.txt").write_text("5,5,10,10,1,4,0,0\n")
    (tmp_path / "dets.txt").write_text("img1 4 0.9 5 5 10 10\nimg1 1 0.8 25 25 10 10\n"
                                       "img2 4 0.7 10 10 10 10\n")
    assert run_cli(["eval", str(tmp_path / "dets.txt"), str(ann), "--csv"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].startswith("overall,100.0,100.0,100.0,100.0")


def test_sparsity_train(tmp_path, capsys):
    out = tmp_path / "sp"
    assert run_cli(["sparsity-train", "--alpha", "0.01", "--epochs", "2", "--seed", "1",
                    "--checkpoints", "2", "-o", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert "loss.csv" in names
    assert sum(n.endswith(".weights") for n in names) == 2
    assert sum(n.startswith("gamma-hist") for n in names) == 2
    ck = sorted(out.glob("checkpoint-*.cfg"))[0]
    load_weights(ck.with_suffix(".weights"), load_cfg(ck))


def test_idempotent_outputs(toy_files):
    d, *_ = toy_files
    for k in (1, 2):
        assert run_cli(["prune", str(d / "toy.cfg"), str(d / "toy.weights"), "--ratio", "0.4",
                        "-o", str(d / f"run{k}")]) == 0
    for name in ("toy-pruned.cfg", "toy-pruned.weights", "toy-pruned-report.txt"):
        assert (d / "run1" / name).read_bytes() == (d / "run2" / name).read_bytes()


@pytest.mark.parametrize("argv", [[], ["bogus"], ["analyze"], ["prune", TINY, "w", "--ratio", "1.5"],
                                  ["analyze", TINY, "--input", "zero"]])
def test_usage_errors(argv, capsys):
    assert run_cli(argv) == 1


def test_input_format_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[net]\nwidth=8\n[bogus]\n")
    assert run_cli(["analyze", str(bad)]) == 2
    assert "line 3" in capsys.readouterr().err
    assert run_cli(["analyze", str(tmp_path / "missing.cfg")]) == 2
    (tmp_path / "short.weights").write_bytes(b"\x00" * 30)
    assert run_cli(["prune", TINY, str(tmp_path / "short.weights")]) == 2
    invalid = tmp_path / "invalid.cfg"
    invalid.write_text("[net]\nwidth=8\nheight=8\nchannels=3\n[convolutional]\nfilters=0\n")
    assert run_cli(["analyze", str(invalid)]) == 2


def test_help_exits_zero(capsys):
    assert run_cli(["--help"]) == 0


def test_prune_iterations_override_preset(tmp_path, monkeypatch):
    from chanprune import cli
    seen = []
    real = cli.iterative_prune

    def spy(net, store, config, **kw):
        seen.append(config)
        return real(net, store, config, **kw)

    monkeypatch.setattr(cli, "iterative_prune", spy)
    net = toynets.toy_detector(np.random.default_rng(0))
    store = random_store(net, np.random.default_rng(1))
    cfg, w = tmp_path / "m.cfg", tmp_path / "m.weights"
    save_cfg(net, cfg)
    save_weights(store, net, w)
    for extra in ([], ["--iterations", "3"]):
        assert run_cli(["prune", str(cfg), str(w), "--preset", "slim-50", "-o", str(tmp_path), *extra]) == 0
    assert [c.iterations for c in seen] == [2, 3]
