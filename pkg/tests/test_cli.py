import json

import numpy as np
import pytest

from fusionembed import cli
from fusionembed import encoder as enc
from fusionembed import synthbench as sb
from fusionembed import trainer as tr

# recorded from the first verified run of `gen` with every default
DEFAULT_GEN_SHA256 = "2d17586c1245fd7bf7e6ab7d66c29c22a89e141dd2baa9f9957bf6161a07b2d5"

SMALL_TRAIN = ["--n-fine", "2", "--dim", "6", "--hidden", "12", "--batch", "8", "--steps", "6"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUTDIR, str(tmp_path))
    return tmp_path


@pytest.fixture
def data(workdir):
    path = workdir / "d.bin"
    assert cli.main(["gen", "--items", "96", "--pool", "24", "--aspects", "2", "--block-dim", "4", "-o", str(path)]) == 0
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def lines(path):
    return [json.loads(x) for x in path.read_text().splitlines()]


class TestGen:
    def test_default_golden(self, workdir):
        assert run("gen") == 0
        ds = sb.load_dataset(workdir / "data.bin")
        assert ds.config == sb.SynthConfig()
        assert ds.checksum() == DEFAULT_GEN_SHA256

    def test_stable_and_reloadable(self, workdir):
        a, b = workdir / "a.bin", workdir / "b.bin"
        for p in (a, b):
            assert run("gen", "--items", 1000, "--aspects", 4, "--mix", "0.25,0.25,0.25,0.25", "--seed", 1, "-o", p) == 0
        assert a.read_bytes() == b.read_bytes()
        assert sb.load_dataset(a).config.seed == 1

    @pytest.mark.parametrize("mix", ["0.5,0.5,0.5,0.5", "a,b,c,d", "0.5,0.5"])
    def test_bad_mix(self, workdir, mix):
        assert run("gen", "--mix", mix) == 2

    def test_unknown_flag(self, workdir):
        assert run("gen", "--bogus") == 2

    def test_unwritable(self, workdir):
        blocker = workdir / "file"
        blocker.write_text("x")
        assert run("gen", "-o", blocker / "sub" / "d.bin") == 1

    def test_manifest(self, workdir):
        assert run("gen", "--items", 10, "--pool", 3, "-o", workdir / "x.bin") == 0
        man = json.loads((workdir / "x.bin.manifest.json").read_text())
        assert man["command"] == "gen" and man["exit_code"] == 0
        assert man["resolved"]["synth"]["n_items"] == 10
        assert man["artifacts"]["dataset"].endswith("x.bin")
        assert man["started"] <= man["finished"]


class TestTrain:
    def test_streams_and_checkpoint(self, data, workdir):
        assert run("train", "--data", data, *SMALL_TRAIN, "--checkpoint-every", 3, "-o", workdir / "m.ckpt") == 0
        recs = lines(workdir / "m.ckpt.metrics.jsonl")
        assert [r["type"] for r in recs] == ["run", "step", "step", "step", "checkpoint", "step", "step", "step",
                                             "checkpoint", "final"]
        assert all("wallclock_ms" not in r for r in recs)
        assert (workdir / "m.step3.ckpt").exists() and (workdir / "m.step6.ckpt").exists()
        assert (workdir / "m.step6.ckpt").read_bytes() == (workdir / "m.ckpt").read_bytes()

    def test_timing_flag(self, data, workdir):
        assert run("train", "--data", data, *SMALL_TRAIN, "--timing") == 0
        steps = [r for r in lines(workdir / "model.ckpt.metrics.jsonl") if r["type"] == "step"]
        assert all(r["wallclock_ms"] > 0 for r in steps)

    def test_deterministic(self, data, workdir):
        for name in ("a", "b"):
            assert run("train", "--data", data, *SMALL_TRAIN, "-o", workdir / f"{name}.ckpt") == 0
        assert (workdir / "a.ckpt").read_bytes() == (workdir / "b.ckpt").read_bytes()
        assert (workdir / "a.ckpt.metrics.jsonl").read_text() == (workdir / "b.ckpt.metrics.jsonl").read_text()

    def test_alpha_changes_stream(self, data, workdir):
        assert run("train", "--data", data, *SMALL_TRAIN, "-o", workdir / "a.ckpt") == 0
        assert run("train", "--data", data, *SMALL_TRAIN, "--alpha", 0, "-o", workdir / "b.ckpt") == 0
        assert (workdir / "a.ckpt.metrics.jsonl").read_text() != (workdir / "b.ckpt.metrics.jsonl").read_text()

    def test_zero_steps_is_initialization(self, data, workdir):
        assert run("train", "--data", data, *SMALL_TRAIN, "--steps", 0, "--seed", 5) == 0
        cfg = tr.TrainConfig(n_fine=2, dim=6, hidden=12, batch_size=8, steps=0, seed=5)
        init = tr.initial_params(cfg, sb.load_dataset(data).config.feature_dim)
        assert (workdir / "model.ckpt").read_bytes() == enc.checkpoint_bytes(init)

    def test_sub_batch_invariance(self, data, workdir):
        assert run("train", "--data", data, *SMALL_TRAIN, "--sub-batch", 1, "-o", workdir / "a.ckpt") == 0
        assert run("train", "--data", data, *SMALL_TRAIN, "--sub-batch", 8, "-o", workdir / "b.ckpt") == 0
        assert (workdir / "a.ckpt").read_bytes() == (workdir / "b.ckpt").read_bytes()

    @pytest.mark.parametrize(
        "extra",
        [
            ["--aggregator", "mean-max", "--mask-f2g"],
            ["--mask-g2g", "--mask-f2g", "--mask-g2f", "--mask-f2f"],
            ["--sub-batch", "9"],
            ["--tau", "0"],
            ["--aggregator", "median"],
        ],
    )
    def test_validation(self, data, extra):
        assert run("train", "--data", data, *SMALL_TRAIN, *extra) == 2

    def test_missing_data(self, workdir):
        assert run("train", "--data", workdir / "none.bin") == 1
        assert run("train") == 2

    def test_config_file_precedence(self, data, workdir):
        conf = workdir / "run.conf"
        conf.write_text("# small run\nsteps = 2\nalpha = 0\nmask-f2f = true\nlr = 0.5\n")
        assert run("train", "--data", data, *SMALL_TRAIN[:-2], "--config", conf, "--lr", "0.001") == 0
        man = json.loads((workdir / "model.ckpt.manifest.json").read_text())
        t = man["resolved"]["train"]
        assert (t["steps"], t["alpha"], t["lr"]) == (2, 0.0, 0.001)
        assert t["mask"]["f2f"] is False and t["tau"] == 0.02

    @pytest.mark.parametrize("body", ["nonsense = 1\n", "steps = many\n", "mask-f2f = maybe\n", "just words\n"])
    def test_bad_config(self, data, workdir, body):
        conf = workdir / "bad.conf"
        conf.write_text(body)
        assert run("train", "--data", data, "--config", conf) == 2

    def test_replay_reproduces(self, data, workdir):
        assert run("train", "--data", data, *SMALL_TRAIN, "-o", workdir / "m.ckpt") == 0
        first = (workdir / "m.ckpt").read_bytes()
        (workdir / "m.ckpt").unlink()
        assert run("replay", workdir / "m.ckpt.manifest.json") == 0
        assert (workdir / "m.ckpt").read_bytes() == first


class TestEval:
    def test_oracle_on_noiseless(self, workdir, capsys):
        path = workdir / "n.bin"
        assert run("gen", "--items", 4, "--pool", 60, "--noise", 0, "-o", path) == 0
        capsys.readouterr()
        assert run("eval", "--data", path, "--oracle", "-o", workdir / "r.json") == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["p_at_1"] == 1.0
        assert json.loads((workdir / "r.json").read_text()) == rec

    def test_per_pattern_consistent(self, data, workdir, capsys):
        assert run("train", "--data", data, *SMALL_TRAIN) == 0
        capsys.readouterr()
        assert run("eval", "--data", data, "--checkpoint", workdir / "model.ckpt", "--aggregator", "max") == 0
        rec = json.loads(capsys.readouterr().out)
        total = sum(rec["per_pattern"][k] * rec["counts"][k] for k in rec["counts"] if rec["counts"][k])
        assert total / sum(rec["counts"].values()) == pytest.approx(rec["p_at_1"])

    def test_missing_files(self, data, workdir):
        assert run("eval", "--data", data, "--checkpoint", workdir / "none.ckpt") == 1
        assert run("eval", "--data", workdir / "none.bin", "--oracle") == 1

    def test_needs_one_model(self, data):
        assert run("eval", "--data", data) == 2

    def test_width_mismatch(self, data, workdir):
        enc.save_checkpoint(enc.init_params(3, 4, 1, 2), workdir / "w.ckpt")
        assert run("eval", "--data", data, "--checkpoint", workdir / "w.ckpt") == 2


class TestGradcheck:
    def test_passes(self, workdir, capsys):
        assert run("gradcheck", "--trials", 5, "--report", workdir / "g.jsonl") == 0
        out = capsys.readouterr().out
        assert "cached_gradients: 5 trials" in out and "chain: 5 trials" in out
        recs = lines(workdir / "g.jsonl")
        assert len(recs) == 10 and all(r["passed"] for r in recs)

    def test_zero_trials(self, workdir, capsys):
        assert run("gradcheck", "--trials", 0) == 0
        assert "no trials" in capsys.readouterr().out

    def test_injected_fault_fails_with_seed(self, workdir, capsys):
        assert run("gradcheck", "--trials", 3, "--seed", 7, "--inject-fault") == 3
        err = capsys.readouterr().err
        assert "seed 7" in err and "--first" in err
        # the hook is always switched back off
        assert run("gradcheck", "--trials", 3, "--seed", 7) == 0

    def test_fault_flag_hidden(self, capsys):
        with pytest.raises(SystemExit):
            cli.build_parser()[1]["gradcheck"].parse_args(["--help"])
        assert "inject" not in capsys.readouterr().out


def test_ablate_table(data, workdir, capsys):
    args = ["ablate", "--data", data, *SMALL_TRAIN[:-2], "--steps", 2]
    assert run(*args, "-o", workdir / "a.tsv") == 0
    assert run(*args, "-o", workdir / "b.tsv") == 0
    table = (workdir / "a.tsv").read_text()
    assert table == (workdir / "b.tsv").read_text()
    rows = table.strip().split("\n")
    assert len(rows) == 19
    assert rows[1].startswith("logsumexp/alpha=20/full\t")
    assert np.all([len(r.split("\t")) == len(rows[0].split("\t")) for r in rows])
