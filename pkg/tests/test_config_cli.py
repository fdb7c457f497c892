import csv
import json
import time

import numpy as np
import pytest

from grpo_restore import config as rc
from grpo_restore import data, grpo
from grpo_restore.cli import main
from grpo_restore.judge import ENDPOINT_ENV, build_prompt


def run(*argv):
    return main([str(a) for a in argv])


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def mined(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert run("synth", "--out", root, "--per-kind", 4, "--size", 32, "--seed", 1) == 0
    assert run("mine", "--corpus", root) == 0
    return root


@pytest.fixture(scope="module")
def trained(mined, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = write_json(out / "in.json", {"epochs": 3, "patch": 32})
    assert run("train", "--corpus", mined, "--out", out, "--config", cfg) == 0
    return out


@pytest.fixture(autouse=True)
def no_env_endpoint(monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)


class TestConfig:
    def test_defaults_match_modules(self):
        cfg = rc.resolve()
        assert rc.train_config(cfg) == grpo.TrainConfig()
        assert rc.degrade_params(cfg) == data.DEFAULT_DEGRADE
        w = rc.reward_weights(cfg)
        assert (w.lambda_gen, w.lambda_qwen, w.lambda_task) == (0.6, 0.1, 0.3)

    def test_hyperparameter_defaults(self):
        cfg = rc.DEFAULTS
        want = {"group_size": 4, "entropy_tau": 0.01, "lr": 3e-5, "head_lr_mult": 6.0, "hard_ratio": 0.3, "epochs": 30,
                "sup_start": 0.35, "sup_end": 0.1, "cons_start": 0.2, "cons_end": 0.05, "adam_beta1": 0.9, "adam_beta2": 0.999}
        assert {k: cfg[k] for k in want} == want

    def test_unknown_key(self, tmp_path):
        with pytest.raises(rc.ConfigError, match="learning_rate"):
            rc.resolve(path=write_json(tmp_path / "c.json", {"learning_rate": 1e-3}))

    @pytest.mark.parametrize("bad", [{"size": 16}, {"group_size": 1}, {"lambda_gen": 0.9}, {"size": "big"}, {"blur_sigma": [3, 1]}])
    def test_bad_values(self, bad):
        with pytest.raises(rc.ConfigError):
            rc.validate(bad)

    def test_precedence(self, tmp_path):
        path = write_json(tmp_path / "c.json", {"lr": 1e-4, "size": 48})
        cfg = rc.resolve("smoke", path, {"size": 40, "seed": None})
        assert (cfg["lr"], cfg["size"], cfg["per_kind"], cfg["seed"]) == (1e-4, 40, 8, 0)

    def test_env_endpoint_wins(self, monkeypatch):
        cfg = rc.resolve(overrides={"judge_endpoint": "http://a"})
        assert rc.judge_endpoint(cfg) == "http://a"
        monkeypatch.setenv(ENDPOINT_ENV, "http://b")
        assert rc.judge_endpoint(cfg) == "http://b"

    def test_not_an_object(self, tmp_path):
        with pytest.raises(rc.ConfigError):
            rc.resolve(path=write_json(tmp_path / "c.json", [1, 2]))


class TestSynth:
    def test_fifty_pairs(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--per-kind", 10, "--size", 32) == 0
        m = data.read_manifest(tmp_path)
        assert len(m.records) == 50
        assert len(list(tmp_path.rglob("*.png"))) == 100
        assert json.loads((tmp_path / rc.CONFIG_NAME).read_text())["per_kind"] == 10

    def test_byte_identical_and_echo_reproduces(self, tmp_path):
        run("synth", "--out", tmp_path / "a", "--per-kind", 2, "--size", 32, "--seed", 5)
        run("synth", "--out", tmp_path / "b", "--per-kind", 2, "--size", 32, "--seed", 5)
        run("synth", "--out", tmp_path / "c", "--config", tmp_path / "a" / rc.CONFIG_NAME)
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                rel = f.relative_to(tmp_path / "a")
                assert f.read_bytes() == (tmp_path / "b" / rel).read_bytes()
                assert f.read_bytes() == (tmp_path / "c" / rel).read_bytes()

    def test_small_size_rejected(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path, "--size", 16) == 1
        assert "size" in capsys.readouterr().err

    def test_bad_flag(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--per-kind", "many") == 1
        assert run("frobnicate") == 1


class TestMine:
    def test_selection_and_report(self, mined):
        m = data.read_manifest(mined)
        assert all(v == {"total": 4, "selected": 2} for v in m.counts.values())
        assert m.ratio == 0.3
        rep = json.loads((mined / "mine_report.json").read_text())
        assert set(rep["kinds"]) == {"denoise", "derain", "dehaze", "deblur", "lowlight"}
        assert sum(rep["kinds"]["derain"]["histogram"]["counts"]) == 4

    def test_fifteen_of_fifty(self, tmp_path):
        run("synth", "--out", tmp_path, "--per-kind", 10, "--size", 32)
        assert run("mine", "--corpus", tmp_path) == 0
        assert sum(r.selected for r in data.read_manifest(tmp_path).records) == 15

    def test_idempotent(self, tmp_path):
        run("synth", "--out", tmp_path, "--per-kind", 3, "--size", 32)
        run("mine", "--corpus", tmp_path)
        first = (tmp_path / data.MANIFEST_NAME).read_bytes()
        run("mine", "--corpus", tmp_path)
        assert (tmp_path / data.MANIFEST_NAME).read_bytes() == first

    def test_missing_manifest(self, tmp_path, capsys):
        assert run("mine", "--corpus", tmp_path) == 1
        assert "manifest" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, trained, mined):
        lines = (trained / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,epoch,total_loss,rl_loss,sup_loss,cons_loss,reward_mean,reward_std,kl,entropy,clip_frac"
        assert len(lines) == 1 + 3 * 10
        summary = json.loads((trained / "summary.json").read_text())
        assert summary["judge"]["mock"] is True and summary["judge"]["endpoint"] is None
        assert summary["steps"] == 30 and summary["epochs_completed"] == 3
        assert set(summary["per_kind"]) == {"denoise", "derain", "dehaze", "deblur", "lowlight"}
        selected = sorted(r.id for r in data.read_manifest(mined).records if r.selected)
        assert sorted(summary["train_ids"]) == selected
        assert json.loads((trained / rc.CONFIG_NAME).read_text())["epochs"] == 3
        grpo.load_checkpoint(trained / "checkpoint.json")

    def test_smoke_profile_budget(self, mined, tmp_path):
        # 32x32, 4 per kind, 3 epochs
        cfg = write_json(tmp_path / "c.json", {"epochs": 3, "max_steps": None})
        t0 = time.perf_counter()
        assert run("train", "--preset", "smoke", "--corpus", mined, "--out", tmp_path / "o", "--config", cfg) == 0
        assert time.perf_counter() - t0 < 300

    def test_deterministic(self, trained, mined, tmp_path):
        run("train", "--corpus", mined, "--out", tmp_path, "--config", trained / "in.json")
        assert (tmp_path / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()

    def test_unmined_corpus(self, tmp_path):
        run("synth", "--out", tmp_path / "c", "--per-kind", 1, "--size", 32)
        assert run("train", "--corpus", tmp_path / "c", "--out", tmp_path / "o") == 1

    def test_nan_aborts_with_sample_id(self, mined, tmp_path, monkeypatch, capsys):
        def boom(*a, **k):
            raise FloatingPointError("non-finite loss on sample 'deblur_0001' at step 0")

        monkeypatch.setattr(grpo, "train_step", boom)
        assert run("train", "--corpus", mined, "--out", tmp_path) == 2
        assert "deblur_0001" in capsys.readouterr().err


class TestEval:
    def test_untrained_matches_baseline(self, mined, tmp_path):
        assert run("train", "--corpus", mined, "--out", tmp_path / "t", "--max-steps", 0) == 0
        assert run("eval", "--corpus", mined, "--checkpoint", tmp_path / "t" / "checkpoint.json", "--out", tmp_path / "e", "--split", "all") == 0
        res = json.loads((tmp_path / "e" / "eval.json").read_text())
        base = {r.id: r.baseline_reward for r in data.read_manifest(mined).records}
        assert len(res["records"]) == len(base)
        for r in res["records"]:
            assert abs(r["combined"] - base[r["id"]]) <= 1e-9

    def test_heldout_disjoint_and_average(self, trained, mined, tmp_path):
        assert run("eval", "--corpus", mined, "--checkpoint", trained / "checkpoint.json", "--out", tmp_path) == 0
        res = json.loads((tmp_path / "eval.json").read_text())
        train_ids = set(json.loads((trained / "summary.json").read_text())["train_ids"])
        ids = {r["id"] for r in res["records"]}
        assert ids and not ids & train_ids
        for m in ("psnr", "ssim", "combined"):
            assert res["average"][m] == pytest.approx(np.mean([v[m] for v in res["per_kind"].values()]), abs=1e-12)
        with open(tmp_path / "eval.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + len(ids)

    def test_bad_checkpoint(self, mined, tmp_path):
        write_json(tmp_path / "ck.json", {"format": "nope"})
        assert run("eval", "--corpus", mined, "--checkpoint", tmp_path / "ck.json", "--out", tmp_path / "e") == 1
        assert run("eval", "--corpus", mined, "--checkpoint", tmp_path / "none.json", "--out", tmp_path / "e") == 1


class TestReport:
    def _log(self, path, epochs, steps=3):
        with grpo.MetricsWriter(path) as w:
            for e in range(epochs):
                for s in range(steps):
                    w(grpo.StepMetrics(e * steps + s, e, 1.0 - 0.01 * e, 0.1, 0.2, 0.1, 0.5 + 0.01 * s, 0.02, 0.0, -0.5, 0.0))

    def test_thirty_epochs(self, tmp_path):
        self._log(tmp_path / "m.csv", 30)
        assert run("report", "--metrics", tmp_path / "m.csv", "--out", tmp_path / "r") == 0
        with open(tmp_path / "r" / "epochs.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 30
        assert float(rows[0]["reward_mean"]) == pytest.approx(0.51)
        assert float(rows[0]["reward_std"]) == pytest.approx(np.std([0.5, 0.51, 0.52]))
        curves = json.loads((tmp_path / "r" / "curves.json").read_text())
        assert curves["epoch"] == list(range(30))

    def test_from_training_run(self, trained, tmp_path):
        assert run("report", "--metrics", trained / "metrics.csv", "--out", tmp_path) == 0
        assert len(json.loads((tmp_path / "curves.json").read_text())["epoch"]) == 3

    def test_empty_log(self, tmp_path, capsys):
        self._log(tmp_path / "m.csv", 0)
        assert run("report", "--metrics", tmp_path / "m.csv", "--out", tmp_path / "r") == 1
        assert "no steps" in capsys.readouterr().err

    def test_malformed(self, tmp_path):
        (tmp_path / "m.csv").write_text("step,epoch\n0,0\n")
        assert run("report", "--metrics", tmp_path / "m.csv", "--out", tmp_path / "r") == 1


class TestJudgeCommand:
    def test_prompt(self, capsys):
        assert run("judge", "prompt") == 0
        assert capsys.readouterr().out == build_prompt()

    def test_parse(self, tmp_path, capsys):
        (tmp_path / "r.txt").write_text("<Degradation>5</Degradation><Score>4</Score>")
        assert run("judge", "parse", tmp_path / "r.txt") == 0
        assert json.loads(capsys.readouterr().out) == {"label": 5, "score": 4, "rescaled": 0.75}
        (tmp_path / "r.txt").write_text("<Score>9</Score>")
        assert run("judge", "parse", tmp_path / "r.txt") == 1

    def test_score_mock(self, mined, capsys):
        rec = data.read_manifest(mined).records[0]
        t = mined / rec.truth
        assert run("judge", "score", "--degraded", mined / rec.degraded, "--restored", t, "--reference", t) == 0
        out = json.loads(capsys.readouterr().out)
        assert (out["mode"], out["score"], out["rescaled"]) == ("mock", 5, 1.0)

    def test_score_unreachable_endpoint_falls_back(self, mined, capsys, tmp_path):
        rec = data.read_manifest(mined).records[0]
        t = mined / rec.truth
        cfg = write_json(tmp_path / "c.json", {"judge_timeout_ms": 200, "judge_retries": 1})
        assert run("judge", "score", "--config", cfg, "--judge-endpoint", "http://127.0.0.1:9/", "--degraded", t, "--restored", t, "--reference", t) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["mode"] == "http" and out["fallback"] is True and out["score"] == 5
