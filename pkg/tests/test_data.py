import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grpo_restore import data
from grpo_restore.data import (
    CorpusManifest,
    DegradeParams,
    ImageFormatError,
    SampleRecord,
    degrade,
    evaluate_baseline,
    gen_clean,
    load_image,
    mine_hard,
    read_manifest,
    save_image,
    synthesize,
    to_u8,
)
from grpo_restore.imgcore import luminance, psnr
from grpo_restore.judge import MockJudge
from grpo_restore.policy import init_params as init_policy
from grpo_restore.backbone import init_params as init_backbone
from grpo_restore.rewards import Degradation, Kind, RewardModel, r_aniso


def scored_manifest(scores_by_kind):
    recs = []
    for kind, scores in scores_by_kind.items():
        for i, s in enumerate(scores):
            recs.append(SampleRecord(f"{kind}_{i:04d}", kind, 25 if kind == "denoise" else None, "d", "t", s))
    return CorpusManifest(1, 0, recs)


class TestCleanScenes:
    def test_deterministic(self):
        a, b = gen_clean(5, 32, 7), gen_clean(5, 32, 7)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert not np.array_equal(a[0], gen_clean(1, 32, 8)[0])

    def test_range_and_shape(self):
        for img in gen_clean(10, 40, 1):
            assert img.shape == (40, 40, 3)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_textured(self):
        stds = [luminance(img).std() for img in gen_clean(200, 32, 2)]
        assert np.mean(np.array(stds) > 0.02) >= 0.95

    def test_min_size(self):
        with pytest.raises(ValueError):
            gen_clean(1, 16, 0)


class TestDegrade:
    def test_denoise_sigma25_psnr(self):
        clean = np.full((64, 64, 3), 0.5)
        vals = [psnr(degrade(clean, Degradation(Kind.DENOISE, 25), s), clean) for s in range(5)]
        assert np.mean(vals) == pytest.approx(20.2, abs=0.5)

    def test_derain_is_anisotropic(self):
        cleans = gen_clean(50, 32, 3)
        scores = [r_aniso(degrade(c, Degradation(Kind.DERAIN), 500 + i)) for i, c in enumerate(cleans)]
        clean_scores = [r_aniso(c) for c in cleans]
        assert np.mean(scores) < 0.8
        assert np.mean(scores) < np.mean(clean_scores)

    def test_lowlight_darkens(self):
        for i, c in enumerate(gen_clean(20, 32, 4)):
            d = degrade(c, Degradation(Kind.LOWLIGHT), i)
            assert luminance(d).mean() < 0.5 * luminance(c).mean()

    def test_dehaze_lifts_dark_pixels(self):
        c = np.full((32, 32, 3), 0.1)
        d = degrade(c, Degradation(Kind.DEHAZE), 0)
        assert d.min() > 0.1 + 0.2 * 0.6  # t <= 0.8 and airlight >= 0.7

    def test_deblur_smooths(self):
        c = gen_clean(1, 32, 5)[0]
        d = degrade(c, Degradation(Kind.DEBLUR), 0)
        assert np.abs(np.diff(d, axis=1)).mean() < np.abs(np.diff(c, axis=1)).mean()

    @pytest.mark.parametrize("kind", list(Kind))
    def test_valid_and_deterministic(self, kind):
        c = gen_clean(1, 32, 6)[0]
        deg = Degradation(kind, 50) if kind is Kind.DENOISE else Degradation(kind)
        a, b = degrade(c, deg, 11), degrade(c, deg, 11)
        np.testing.assert_array_equal(a, b)
        assert a.shape == c.shape and a.min() >= 0 and a.max() <= 1

    def test_params_from_config(self):
        p = DegradeParams.from_dict({"blur_sigma": [2.0, 2.0]})
        assert p.blur_sigma == (2.0, 2.0)
        with pytest.raises(ValueError):
            DegradeParams(blur_sigma=(3.0, 1.0))
        c = gen_clean(1, 32, 7)[0]
        assert not np.array_equal(degrade(c, Degradation(Kind.DEBLUR), 0), degrade(c, Degradation(Kind.DEBLUR), 0, p))


class TestImageFiles:
    @pytest.mark.parametrize("suffix, c", [(".png", 3), (".png", 1), (".ppm", 3), (".pgm", 1)])
    def test_u8_roundtrip(self, tmp_path, suffix, c):
        u8 = np.random.default_rng(0).integers(0, 256, (9, 13, c), dtype=np.uint8)
        path = tmp_path / f"x{suffix}"
        save_image(path, u8 / 255.0)
        back = load_image(path)
        np.testing.assert_array_equal(to_u8(back), u8)

    def test_half_rounds_up(self):
        assert to_u8(np.array([0.5]))[0] == 128
        assert to_u8(np.array([-0.2, 1.7]))[1] == 255

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 255))
    def test_every_level_roundtrips(self, v):
        assert to_u8(np.array([v / 255.0]))[0] == v

    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_truncated(self, tmp_path, suffix):
        path = tmp_path / f"x{suffix}"
        save_image(path, np.random.default_rng(1).random((16, 16, 3)))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ImageFormatError):
            load_image(path)

    def test_bit_depth(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P6\n8 8\n65535\n" + bytes(8 * 8 * 6))
        with pytest.raises(ImageFormatError, match="bit depth"):
            load_image(path)

    def test_garbage(self, tmp_path):
        path = tmp_path / "x.png"
        path.write_bytes(b"not an image")
        with pytest.raises(ImageFormatError):
            load_image(path)


class TestSynthesize:
    def test_layout_and_manifest(self, tmp_path):
        m = synthesize(tmp_path, 3, 32, 0)
        assert len(m.records) == 15
        assert m.counts == {k.value: {"total": 3, "selected": 0} for k in Kind}
        for r in m.records:
            assert (tmp_path / r.degraded).exists() and (tmp_path / r.truth).exists()
            assert r.degraded == f"{r.kind}/{r.id}_deg.png"
        sigmas = [r.sigma for r in m.records if r.kind == "denoise"]
        assert sigmas == [15, 25, 50]
        assert read_manifest(tmp_path).to_json() == m.to_json()

    def test_byte_identical(self, tmp_path):
        synthesize(tmp_path / "a", 2, 32, 4)
        synthesize(tmp_path / "b", 2, 32, 4)
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_manifest_version_checked(self, tmp_path):
        synthesize(tmp_path, 1, 32, 0)
        path = tmp_path / data.MANIFEST_NAME
        obj = json.loads(path.read_text())
        obj["version"] = 99
        path.write_text(json.dumps(obj))
        with pytest.raises(ValueError):
            read_manifest(tmp_path)


class TestBaseline:
    def _setup(self, tmp_path):
        m = synthesize(tmp_path, 2, 32, 1)
        return m, init_policy(np.random.default_rng(0)), init_backbone(3), RewardModel(MockJudge())

    def test_scores_deterministic_and_bounded(self, tmp_path):
        m, pp, bp, rm = self._setup(tmp_path)
        a = evaluate_baseline(m.records, tmp_path, pp, bp, rm)
        b = evaluate_baseline(m.records, tmp_path, pp, bp, rm)
        assert [r.baseline_reward for r in a] == [r.baseline_reward for r in b]
        assert all(0.0 <= r.baseline_reward <= 1.0 for r in a)

    def test_clean_input_scores_high(self, tmp_path):
        m, pp, bp, rm = self._setup(tmp_path)
        recs = [r for r in m.records if r.kind == "deblur"]
        recs[0].degraded = recs[0].truth
        scored = evaluate_baseline(recs, tmp_path, pp, bp, rm)
        assert scored[0].baseline_reward > scored[1].baseline_reward

    def test_failure_scores_zero(self, tmp_path, caplog):
        m, pp, bp, rm = self._setup(tmp_path)
        rec = m.records[0]
        (tmp_path / rec.degraded).write_bytes(b"broken")
        scored = evaluate_baseline([rec], tmp_path, pp, bp, rm)
        assert scored[0].baseline_reward == 0.0
        assert rec.id in caplog.text


class TestMining:
    def test_three_of_ten(self):
        rng = np.random.default_rng(0)
        m = mine_hard(scored_manifest({k.value: rng.random(10) for k in Kind}), 0.3)
        assert all(v["selected"] == 3 for v in m.counts.values())
        assert sum(r.selected for r in m.records) == 15

    @pytest.mark.parametrize("ratio", [0.1, 0.3, 0.5, 1.0])
    @pytest.mark.parametrize("n", [1, 7, 10, 13])
    def test_ceil_contract(self, ratio, n):
        rng = np.random.default_rng(n)
        m = mine_hard(scored_manifest({"deblur": rng.random(n), "dehaze": rng.random(n)}), ratio)
        for v in m.counts.values():
            assert v["selected"] == math.ceil(round(ratio * n, 9))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.sampled_from([0.1, 0.3, 0.5, 1.0]))
    def test_selected_are_worst(self, scores, ratio):
        m = mine_hard(scored_manifest({"derain": scores}), ratio)
        sel = [r.baseline_reward for r in m.records if r.selected]
        rest = [r.baseline_reward for r in m.records if not r.selected]
        if rest:
            assert max(sel) <= min(rest)

    def test_ties_by_id(self):
        m = mine_hard(scored_manifest({"derain": [0.5, 0.5, 0.5, 0.5]}), 0.5)
        assert [r.selected for r in m.records] == [True, True, False, False]

    def test_global_mode(self):
        m = mine_hard(scored_manifest({"deblur": [0.1, 0.2], "dehaze": [0.8, 0.9]}), 0.5, stratified=False)
        assert [r.kind for r in m.records if r.selected] == ["deblur", "deblur"]

    def test_requires_scores(self):
        m = scored_manifest({"deblur": [0.1]})
        m.records[0].baseline_reward = None
        with pytest.raises(ValueError):
            mine_hard(m)

    @pytest.mark.parametrize("ratio", [0.0, 1.5, -0.1])
    def test_ratio_bounds(self, ratio):
        with pytest.raises(ValueError):
            mine_hard(scored_manifest({"deblur": [0.1]}), ratio)
