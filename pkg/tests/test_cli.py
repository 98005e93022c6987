import csv
import subprocess
import sys

import numpy as np
import pytest

from pcac.cli import main
from pcac.pointcloud_io import PointCloud, load_ply, save_ply


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic corpus plus context and factorized models trained through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert main(["synth", "--out", str(corpus), "--count", "4", "--seed", "3", "--voxels", "150", "--depth", "5"]) == 0
    for name, comps in (("context.bin", "HLCS"), ("factorized.bin", "none")):
        argv = ["train", "--corpus", str(corpus), "--out", str(root / name), "--epochs", "2",
                "--depth", "5", "--components", comps]
        assert main(argv) == 0
    return root


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestPipeline:
    @pytest.mark.parametrize("mode", ["rlgr", "factorized", "context"])
    def test_encode_decode_eval(self, workspace, tmp_path, mode, capsys):
        src = workspace / "corpus" / "cloud_000.ply"
        model = [] if mode == "rlgr" else ["--model", str(workspace / f"{mode}.bin")]
        bits, geom, recon = tmp_path / "a.bin", tmp_path / "g.ply", tmp_path / "r.ply"
        assert main(["encode", "--input", str(src), "--output", str(bits), "--geometry-out", str(geom),
                     "--depth", "5", "--qstep", "4", "--mode", mode, *model]) == 0
        assert "bpp" in capsys.readouterr().out
        assert main(["decode", "--input", str(bits), "--geometry", str(geom), "--output", str(recon), *model]) == 0
        assert len(load_ply(recon)) == len(load_ply(geom))
        capsys.readouterr()
        assert main(["eval", "--original", str(geom), "--recon", str(recon), "--bitstream", str(bits)]) == 0
        out = capsys.readouterr().out
        psnr_y = float(next(line for line in out.splitlines() if line.startswith("PSNR_Y")).split()[1])
        assert psnr_y > 35
        assert "BPP" in out

    def test_module_entry_point(self, workspace, tmp_path):
        src = workspace / "corpus" / "cloud_001.ply"
        run = subprocess.run(
            [sys.executable, "-m", "pcac", "encode", "--input", str(src), "--output", str(tmp_path / "x.bin"),
             "--depth", "5", "--mode", "rlgr"],
            capture_output=True, text=True,
        )
        assert run.returncode == 0, run.stderr
        assert (tmp_path / "x.bin").stat().st_size > 69

    def test_loss_csv(self, workspace, tmp_path):
        out = tmp_path / "loss.csv"
        assert main(["train", "--corpus", str(workspace / "corpus"), "--out", str(tmp_path / "m.bin"),
                     "--epochs", "2", "--depth", "5", "--components", "H", "--loss-csv", str(out)]) == 0
        rows = read_rows(out)
        assert rows[0] == ["epoch", "nats", "bpp"] and len(rows) == 3


class TestRdSweep:
    def sweep(self, workspace, csv_path, qsteps="5,10,20,40", mode="context"):
        model = [] if mode == "rlgr" else ["--model", str(workspace / f"{mode}.bin")]
        return main(["rd-sweep", "--input", str(workspace / "corpus" / "cloud_002.ply"), "--qsteps", qsteps,
                     "--mode", mode, "--depth", "5", "--csv", str(csv_path), *model])

    @pytest.mark.parametrize("mode", ["rlgr", "context"])
    def test_monotone(self, workspace, tmp_path, mode):
        assert self.sweep(workspace, tmp_path / "rd.csv", mode=mode) == 0
        rows = read_rows(tmp_path / "rd.csv")
        assert rows[0] == ["qstep", "bpp", "psnr_y", "psnr_R", "psnr_G", "psnr_B", "mode"]
        body = rows[1:]
        assert [r[0] for r in body] == ["5", "10", "20", "40"]
        bpp = [float(r[1]) for r in body]
        assert all(a > b for a, b in zip(bpp, bpp[1:]))
        assert all(r[-1] == mode for r in body)

    def test_single_qstep(self, workspace, tmp_path):
        assert self.sweep(workspace, tmp_path / "rd.csv", qsteps="10", mode="rlgr") == 0
        assert len(read_rows(tmp_path / "rd.csv")) == 2

    def test_thread_count_does_not_change_output(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("THREADS", "1")
        self.sweep(workspace, tmp_path / "one.csv")
        monkeypatch.setenv("THREADS", "4")
        self.sweep(workspace, tmp_path / "four.csv")
        assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "four.csv").read_bytes()

    def test_bad_threads(self, workspace, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("THREADS", "many")
        assert self.sweep(workspace, tmp_path / "rd.csv", mode="rlgr") == 1
        assert "THREADS" in capsys.readouterr().err

    def test_bad_qsteps(self, workspace, tmp_path):
        with pytest.raises(SystemExit):
            self.sweep(workspace, tmp_path / "rd.csv", qsteps="10,-1", mode="rlgr")


class TestErrors:
    @pytest.mark.parametrize("cmd", ["encode", "rd-sweep"])
    def test_missing_model(self, workspace, tmp_path, capsys, cmd):
        src = str(workspace / "corpus" / "cloud_000.ply")
        out = ["--output", str(tmp_path / "o.bin")] if cmd == "encode" else ["--csv", str(tmp_path / "o.csv")]
        assert main([cmd, "--input", src, "--mode", "context", "--depth", "5", *out]) == 1
        err = capsys.readouterr().err
        assert err.startswith(f"pcac {cmd}: error:") and "--model" in err

    def test_missing_input(self, tmp_path, capsys):
        assert main(["encode", "--input", str(tmp_path / "nope.ply"), "--output", str(tmp_path / "o"),
                     "--mode", "rlgr"]) == 1
        assert "error" in capsys.readouterr().err

    def test_corrupt_files_skipped(self, workspace, tmp_path, caplog):
        corpus = tmp_path / "mixed"
        corpus.mkdir()
        good = (workspace / "corpus" / "cloud_000.ply").read_bytes()
        (corpus / "a.ply").write_bytes(good)
        (corpus / "b.ply").write_text("ply\nthis is not a header\n")
        assert main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "m.bin"), "--epochs", "1",
                     "--depth", "5"]) == 0
        assert "b.ply" in caplog.text

    def test_all_corrupt(self, tmp_path, capsys):
        corpus = tmp_path / "bad"
        corpus.mkdir()
        (corpus / "x.ply").write_text("garbage")
        assert main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "m.bin")]) == 1
        assert "unreadable" in capsys.readouterr().err

    def test_eval_size_mismatch(self, workspace, tmp_path, capsys):
        a = workspace / "corpus" / "cloud_000.ply"
        pc = load_ply(a)
        save_ply(PointCloud(pc.positions[:-3], pc.attributes[:-3], pc.channel_names), tmp_path / "short.ply")
        assert main(["eval", "--original", str(a), "--recon", str(tmp_path / "short.ply")]) == 1
        assert "differ" in capsys.readouterr().err

    def test_eval_identical(self, workspace, capsys):
        a = str(workspace / "corpus" / "cloud_003.ply")
        assert main(["eval", "--original", a, "--recon", a]) == 0
        assert "PSNR_Y 999.0000 dB" in capsys.readouterr().out

    def test_decode_needs_integer_geometry(self, workspace, tmp_path, capsys):
        src = workspace / "corpus" / "cloud_000.ply"
        bits = tmp_path / "a.bin"
        main(["encode", "--input", str(src), "--output", str(bits), "--depth", "5", "--mode", "rlgr"])
        pc = load_ply(src)
        save_ply(PointCloud(pc.positions + 0.25, pc.attributes, pc.channel_names), tmp_path / "g.ply")
        assert main(["decode", "--input", str(bits), "--geometry", str(tmp_path / "g.ply"),
                     "--output", str(tmp_path / "r.ply")]) == 1
        assert "integer" in capsys.readouterr().err
