import json

import numpy as np
import pytest

from fakedata import write_fake_cifar
from lowbit import cli, netmodel, quantcore

TINY_ARCH = {"name": "tiny", "layers": [{"kind": "conv", "filters": 2, "kernel": 3, "pool": 2},
                                        {"kind": "dense", "units": 4}]}


def run(argv):
    return cli.main([str(a) for a in argv])


def test_parse_seeds():
    assert cli.parse_seeds("3") == [3]
    assert cli.parse_seeds("0-4") == [0, 1, 2, 3, 4]
    assert cli.parse_seeds("1,5-6, 9") == [1, 5, 6, 9]


def test_config_roundtrip(tmp_path):
    cfg = cli.RunConfig(bits=3, seeds=[1, 2], positive=[0], negative=[9], subsample=0.5)
    back = cli.RunConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg and back.digest() == cfg.digest()
    assert cli.RunConfig(out="a").digest() == cli.RunConfig(out="b").digest()
    assert cli.RunConfig(bits=2).digest() != cli.RunConfig(bits=3).digest()
    with pytest.raises(ValueError):
        cli.RunConfig.from_dict({"bogus": 1})


def test_config_file_and_flag_override(tmp_path, fake_mnist):
    path = tmp_path / "c.json"
    path.write_text(cli.RunConfig(bits=2, seeds=[4], data=str(fake_mnist), method="gcd").to_json())
    args = cli.make_parser().parse_args(["train-single", "--config", str(path), "--bits", "1"])
    cfg = cli.config_from_args(args)
    assert cfg.bits == 1 and cfg.seeds == [4] and cfg.method == "gcd"


def test_train_single_outputs_and_determinism(tmp_path, fake_mnist):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["train-single", "--data", fake_mnist, "--seeds", "0-1", "--out", out]) == 0
        outs.append(out)
    a, b = outs
    for fname in ("metrics.json", "seeds.csv", "weights/seed0.lbw", "weights/seed1.lbw",
                  "weights/seed0.csv"):
        assert (a / fname).read_bytes() == (b / fname).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["command"] == "train-single" and manifest["seeds"] == [0, 1]
    assert len(manifest["config_hash"]) == 16 and manifest["build_id"]
    metrics = json.loads((a / "metrics.json").read_text())
    assert metrics["test_acc"]["n"] == 2
    w = quantcore.load(a / "weights" / "seed0.lbw")
    assert w.d == 784
    assert np.loadtxt(a / "weights" / "seed0.csv", delimiter=",").shape == (28, 28)
    assert "seconds_per_seed" in json.loads((a / "timing.json").read_text())


def test_train_single_multibit(tmp_path, fake_mnist):
    out = tmp_path / "m"
    assert run(["train-single", "--data", fake_mnist, "--bits", "2", "--out", out]) == 0
    w = quantcore.load(out / "weights" / "seed0.lbw")
    assert len(w.components) == 2
    s = np.sqrt(2 / 784)
    assert set(np.round(quantcore.compose(w) / s, 9).tolist()) <= {-1.0, 0.0, 1.0}


def test_baseline_sag(tmp_path, fake_mnist):
    out = tmp_path / "s"
    assert run(["baseline-sag", "--data", fake_mnist, "--out", out]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["kind"] == "sag" and metrics["test_acc"]["mean"] > 0.5
    assert np.loadtxt(out / "weights_seed0.csv", delimiter=",").shape == (784,)


def test_train_mlp_and_report(tmp_path, fake_mnist):
    arch = tmp_path / "tiny.json"
    arch.write_text(json.dumps(TINY_ARCH))
    outs = []
    for name in ("x", "y"):
        out = tmp_path / "runs" / name
        assert run(["train-mlp", "--data", fake_mnist, "--config", arch, "--sweeps", "2",
                    "--method", "hybrid", "--out", out]) == 0
        outs.append(out)
    x, y = outs
    assert (x / "metrics.json").read_bytes() == (y / "metrics.json").read_bytes()
    assert (x / "model_seed0" / "layer0.lbw").read_bytes() == \
        (y / "model_seed0" / "layer0.lbw").read_bytes()
    rows = (x / "sweeps_seed0.csv").read_text().splitlines()
    assert rows[0] == "sweep,train_loss,test_loss,test_acc,seconds" and len(rows) == 3
    report = json.loads((x / "report_seed0.json").read_text())
    assert report["meta"]["layer_methods"] == ["gcd", "rsm"]
    model = netmodel.load_model(x / "model_seed0")
    assert model.depth == 3
    text = cli.cmd_report([tmp_path / "runs"])
    assert "| tiny | HYBRID | 1 |" in text
    assert run(["report", tmp_path / "runs", "--out", tmp_path / "r.md"]) == 0
    assert (tmp_path / "r.md").read_text() == text


def test_report_single_table(tmp_path, fake_mnist):
    run(["baseline-sag", "--data", fake_mnist, "--out", tmp_path / "sag"])
    text = cli.cmd_report([tmp_path])
    assert text.startswith("| Method | Weights |") and "| SAG | full precision |" in text
    assert cli.cmd_report([tmp_path / "nothing"]).startswith("no metrics")


def test_missing_data(tmp_path, capsys):
    assert run(["train-single", "--data", tmp_path / "none", "--out", tmp_path / "o"]) == 2
    assert cli.dataio.DATA_DIR_ENV in capsys.readouterr().err


def test_unknown_architecture(tmp_path, fake_mnist, capsys):
    assert run(["train-mlp", "--data", fake_mnist, "--arch", "vgg", "--out", tmp_path / "o"]) == 2
    assert "vgg" in capsys.readouterr().err


def test_cifar_needs_opt_in(tmp_path):
    root = write_fake_cifar(tmp_path / "c", per_batch=10)
    with pytest.raises(SystemExit):
        run(["train-mlp", "--dataset", "cifar10", "--data", root, "--out", tmp_path / "o"])


def test_verify_exit_codes(capsys):
    assert run(["verify", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out
    assert run(["verify", "--quick", "--inject-fault"]) == 1
    assert "[FAIL]" in capsys.readouterr().out
    assert run(["verify", "--exhaustive-d", "4"]) == 0
    assert run(["verify", "--exhaustive-d", "14"]) == 2
