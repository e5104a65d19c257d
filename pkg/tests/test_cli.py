import json

import numpy as np
import pytest

from skthdr.cli import main
from skthdr.raster import read_named

TINY = ["height=16", "width=16", "n_train=2", "n_test=2", "batch_size=2", "epochs=1",
        "orm_width=8", "spgrm_width=8", "skam_latent=4", "fpn_inner=4"]


def _sets(items):
    return [a for kv in items for a in ("--set", kv)]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text("\n".join(TINY) + "\n")
    assert main(["train", "--config", str(d / "tiny.cfg"), "--out", str(d / "run")]) == 0
    assert main(["synth", "--config", str(d / "tiny.cfg"), "--out", str(d / "data")]) == 0
    return d


class TestSubcommands:
    def test_train_outputs(self, workdir, capsys):
        assert (workdir / "run" / "report.json").exists()
        assert (workdir / "run" / "distilled_last.ckpt").exists()

    def test_train_prints_metrics(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path)] + _sets(TINY + ["arms=baseline", "epochs=0"])) == 0
        assert "baseline" in json.loads(capsys.readouterr().out)

    def test_synth_layout(self, workdir):
        manifest = json.loads((workdir / "data" / "manifest.json").read_text())
        assert len(manifest["splits"]["train"]) == 2 and len(manifest["splits"]["test"]) == 2
        for name in manifest["splits"]["test"]:
            assert (workdir / "data" / name).exists()

    def test_infer(self, workdir, capsys):
        scene = json.loads((workdir / "data" / "manifest.json").read_text())["splits"]["test"][0]
        out = workdir / "pred.bin"
        rc = main(["infer", "--ckpt", str(workdir / "run" / "distilled_last.ckpt"),
                   "--input", str(workdir / "data" / scene), "--output", str(out)])
        assert rc == 0
        assert read_named(out)["hdr"].shape == (3, 16, 16)
        assert np.isfinite(json.loads(capsys.readouterr().out)["psnr_mu"])

    def test_eval(self, workdir, capsys):
        report = workdir / "eval" / "summary.json"
        rc = main(["eval", "--ckpt", str(workdir / "run" / "baseline_last.ckpt"),
                   "--data", str(workdir / "data"), "--report", str(report)])
        assert rc == 0
        summary = json.loads(report.read_text())
        assert summary["n"] == 2
        assert report.with_suffix(".csv").exists()

    def test_gradcheck_subset(self, capsys):
        assert main(["gradcheck", "--only", "add", "exp"]) == 0
        assert "all 2 checks passed" in capsys.readouterr().out


class TestErrors:
    def test_bad_config_exits_2(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("epochs = -1\n")
        assert main(["train", "--config", str(tmp_path / "bad.cfg")]) == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_missing_checkpoint_exits_2(self, tmp_path):
        assert main(["infer", "--ckpt", str(tmp_path / "x.ckpt"), "--input", str(tmp_path / "y.scn")]) == 2

    def test_eval_empty_split(self, workdir):
        assert main(["eval", "--ckpt", str(workdir / "run" / "baseline_last.ckpt"),
                     "--data", str(workdir / "data"), "--split", "val"]) == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit):
            main(["bogus"])
