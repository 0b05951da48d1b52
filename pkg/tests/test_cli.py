import json
from pathlib import Path

import numpy as np
import pytest

from gliosynth.cli import main
from gliosynth.image import read_image, read_mask, write_image, write_mask
from gliosynth.mechanistic import GrowthParams
from gliosynth.phantom import PhantomSpec, write_phantom_spec

GROWTH = GrowthParams(initial_area=90.0, growth_rate=0.03,
                      surviving_fraction=0.92, decay_rate=0.02,
                      decay_delay=15.0, decay_slope=0.1, rt_start=22.0)


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom")
    spec = PhantomSpec(growth=GROWTH,
                       observation_times=(0.0, 10.0, 20.0, 27.0, 34.0, 41.0),
                       tumor_center=(24.0, 32.0), halo_len=9.0)
    write_phantom_spec(root / "spec.json", spec)
    assert main(["phantom", "--spec", str(root / "spec.json"),
                 "--out", str(root / "out"), "--seed", "3"]) == 0
    return root / "out"


class TestPhantomCommand:
    def test_outputs_exist_and_are_consistent(self, phantom_dir):
        manifest = json.loads((phantom_dir / "manifest.json").read_text())
        assert len(manifest["frames"]) == 6
        img = read_image(phantom_dir / manifest["frames"][0]["image"])
        mask = read_mask(phantom_dir / manifest["frames"][0]["mask"])
        assert img.pixels.shape == mask.bits.shape
        for frame in manifest["frames"]:
            assert frame["mask_area_mm2"] == pytest.approx(
                frame["model_area_mm2"], rel=0.02)

    def test_deterministic(self, phantom_dir, tmp_path):
        spec_path = phantom_dir.parent / "spec.json"
        assert main(["phantom", "--spec", str(spec_path),
                     "--out", str(tmp_path / "again"), "--seed", "3"]) == 0
        for name in ("t000_image.img", "t003_mask.img", "series.csv",
                     "manifest.json"):
            assert (tmp_path / "again" / name).read_bytes() == \
                (phantom_dir / name).read_bytes()


class TestFitPredict:
    def test_fit_then_predict(self, phantom_dir, tmp_path, capsys):
        fit_path = tmp_path / "fit.json"
        rc = main(["fit", "--series", str(phantom_dir / "series.csv"),
                   "--meta", str(phantom_dir / "series_meta.json"),
                   "--bootstrap", "12", "--noise", "0.05", "--seed", "4",
                   "--out", str(fit_path)])
        assert rc == 0
        payload = json.loads(fit_path.read_text())
        assert payload["fit"]["r_squared"] > 0.95
        assert len(payload["ensemble"]["replicates"]) == 12
        capsys.readouterr()
        rc = main(["predict", "--fit", str(fit_path), "--time", "66",
                   "--quantiles", "2.5,50,97.5"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        q = out["quantiles"]
        assert q["2.5"] <= q["50"] <= q["97.5"]

    def test_fit_determinism(self, phantom_dir, tmp_path):
        args = ["fit", "--series", str(phantom_dir / "series.csv"),
                "--meta", str(phantom_dir / "series_meta.json"),
                "--bootstrap", "6", "--noise", "0.1", "--seed", "9"]
        main(args + ["--out", str(tmp_path / "a.json")])
        main(args + ["--out", str(tmp_path / "b.json")])
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_missing_file_exit_code(self, tmp_path):
        rc = main(["fit", "--series", str(tmp_path / "nope.csv"),
                   "--meta", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "x.json")])
        assert rc == 2


class TestGenerateCommand:
    def test_generate_runs_and_is_deterministic(self, phantom_dir, tmp_path):
        args = ["generate", "--image", str(phantom_dir / "t005_image.img"),
                "--mask", str(phantom_dir / "brain_mask.img"),
                "--target", "0.15", "--nl", "40", "--steps", "200",
                "--s-ct", "50000", "--seed", "12"]
        assert main(args + ["--out", str(tmp_path / "a.img")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.img")]) == 0
        assert (tmp_path / "a.img").read_bytes() == (tmp_path / "b.img").read_bytes()

    def test_delta_denoiser_unguided_reconstructs(self, phantom_dir, tmp_path):
        rc = main(["generate", "--image", str(phantom_dir / "t005_image.img"),
                   "--mask", str(phantom_dir / "brain_mask.img"),
                   "--target", "0.15", "--nl", "40", "--steps", "200",
                   "--s-ct", "0", "--denoiser", "analytic-delta",
                   "--seed", "1", "--out", str(tmp_path / "recon.img")])
        assert rc == 0
        ref = read_image(phantom_dir / "t005_image.img")
        out = read_image(tmp_path / "recon.img")
        assert np.abs(out.pixels - ref.pixels).max() < 1e-4

    def test_rejects_out_of_domain_image(self, phantom_dir, tmp_path):
        from gliosynth.image import Image2D
        bad = Image2D(pixels=np.linspace(-5, 5, 64).reshape(8, 8))
        write_image(tmp_path / "bad.img", bad)
        write_mask(tmp_path / "m.img",
                   read_mask(phantom_dir / "brain_mask.img"))
        rc = main(["generate", "--image", str(tmp_path / "bad.img"),
                   "--mask", str(phantom_dir / "brain_mask.img"),
                   "--target", "0.1", "--nl", "5", "--steps", "20",
                   "--seed", "0", "--out", str(tmp_path / "x.img")])
        assert rc == 2

    def test_unknown_backend(self, phantom_dir, tmp_path):
        rc = main(["generate", "--image", str(phantom_dir / "t005_image.img"),
                   "--mask", str(phantom_dir / "brain_mask.img"),
                   "--target", "0.1", "--denoiser", "neural",
                   "--seed", "0", "--out", str(tmp_path / "x.img")])
        assert rc == 2

    def test_plugin_failure_exit_code(self, phantom_dir, tmp_path):
        rc = main(["generate", "--image", str(phantom_dir / "t005_image.img"),
                   "--mask", str(phantom_dir / "brain_mask.img"),
                   "--target", "0.1", "--denoiser", "plugin:/no/such/backend",
                   "--seed", "0", "--out", str(tmp_path / "x.img")])
        assert rc == 4


class TestProbmapCommand:
    def test_static_map(self, phantom_dir, tmp_path):
        rc = main(["probmap", "--mode", "static",
                   "--image", str(phantom_dir / "t005_image.img"),
                   "--mask", str(phantom_dir / "brain_mask.img"),
                   "--target", "0.14", "--repeats", "4", "--nl", "40",
                   "--steps", "200", "--seed", "2",
                   "--out-map", str(tmp_path / "pm.img"),
                   "--out-mask", str(tmp_path / "mask.img")])
        assert rc == 0
        pm = read_image(tmp_path / "pm.img")
        assert pm.pixels.min() >= 0.0 and pm.pixels.max() <= 1.0
        sidecar = json.loads((tmp_path / "pm.img.json").read_text())
        assert sidecar["mode"] == "static" and sidecar["n_aggregated"] == 4

    def test_dynamic_map_deterministic(self, phantom_dir, tmp_path):
        args = ["probmap", "--mode", "dynamic",
                "--series", str(phantom_dir / "series.csv"),
                "--series-meta", str(phantom_dir / "series_meta.json"),
                "--image", str(phantom_dir / "t005_image.img"),
                "--mask", str(phantom_dir / "brain_mask.img"),
                "--time", "66", "--bootstrap", "8", "--noise", "0.05",
                "--nl", "40", "--steps", "200", "--seed", "5"]
        assert main(args + ["--out-map", str(tmp_path / "a.img"),
                            "--out-mask", str(tmp_path / "am.img")]) == 0
        assert main(args + ["--out-map", str(tmp_path / "b.img"),
                            "--out-mask", str(tmp_path / "bm.img")]) == 0
        assert (tmp_path / "a.img").read_bytes() == (tmp_path / "b.img").read_bytes()
        assert (tmp_path / "am.img").read_bytes() == (tmp_path / "bm.img").read_bytes()
        sidecar = json.loads((tmp_path / "a.img.json").read_text())
        assert sidecar["mode"] == "dynamic"
        assert sidecar["n_targets"] >= 7  # cap 90% keeps most of 8

    def test_dynamic_requires_series(self, phantom_dir, tmp_path):
        rc = main(["probmap", "--mode", "dynamic",
                   "--image", str(phantom_dir / "t005_image.img"),
                   "--mask", str(phantom_dir / "brain_mask.img"),
                   "--out-map", str(tmp_path / "x.img"),
                   "--out-mask", str(tmp_path / "y.img")])
        assert rc == 2


class TestEvalCommand:
    def test_ssim(self, phantom_dir, capsys):
        rc = main(["eval", "ssim", "--a", str(phantom_dir / "t000_image.img"),
                   "--b", str(phantom_dir / "t005_image.img"),
                   "--region", str(phantom_dir / "brain_mask.img")])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert -1.0 <= out["ssim"] <= 1.0

    def test_hd95(self, phantom_dir, capsys):
        rc = main(["eval", "hd95", "--a", str(phantom_dir / "t000_mask.img"),
                   "--b", str(phantom_dir / "t005_mask.img")])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["hd95_mm"] > 0

    def test_wilcoxon(self, tmp_path, capsys):
        xs = tmp_path / "x.csv"
        ys = tmp_path / "y.csv"
        xs.write_text("".join(f"{v}\n" for v in [5.0, 6.0, 7.0, 8.0, 9.0, 10.0]))
        ys.write_text("".join(f"{v}\n" for v in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
        rc = main(["eval", "wilcoxon", "--x", str(xs), "--y", str(ys)])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["method"] == "exact"
        assert out["p_two_sided"] == pytest.approx(2 / 64)

    def test_degenerate_exit_code(self, tmp_path):
        xs = tmp_path / "x.csv"
        xs.write_text("1.0\n2.0\n3.0\n4.0\n5.0\n")
        rc = main(["eval", "wilcoxon", "--x", str(xs), "--y", str(xs)])
        assert rc == 2


class TestGridsearchCommand:
    def test_table_written(self, phantom_dir, tmp_path):
        manifest = [{"image": str(phantom_dir / "t005_image.img"),
                     "brain_mask": str(phantom_dir / "brain_mask.img"),
                     "tumor_mask": str(phantom_dir / "t005_mask.img"),
                     "target": 0.15}]
        pairs_path = tmp_path / "pairs.json"
        pairs_path.write_text(json.dumps(manifest))
        rc = main(["gridsearch", "--pairs", str(pairs_path),
                   "--nl", "20,40", "--s-ct", "0,25000",
                   "--steps", "200", "--seed", "1",
                   "--out", str(tmp_path / "table.csv")])
        assert rc == 0
        lines = (tmp_path / "table.csv").read_text().strip().splitlines()
        assert lines[0] == "nl,s_ct,ssim_tumor,ssim_outside"
        assert len(lines) == 5
