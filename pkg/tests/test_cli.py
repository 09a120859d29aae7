import itertools

import numpy as np
import pytest
from PIL import Image

from icae import cli
from icae.images import save_png
from icae.model import CodecModel
from icae.transforms import ArchConfig


@pytest.fixture()
def model_file(tmp_path, tiny_model):
    path = tmp_path / "model.ckpt"
    tiny_model.save(path)
    return path


def write_images(directory, count=3, size=(72, 88), seed=0):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        path = directory / f"img{i:02d}.png"
        save_png(path, rng.integers(0, 256, (*size, 3)).astype(np.uint8))
        paths.append(path)
    return paths


class FakeClock:
    """Deterministic clock: every call advances exactly one second."""

    def __init__(self):
        self._ticks = itertools.count()
        self.calls = 0

    def __call__(self):
        self.calls += 1
        return float(next(self._ticks))


class TestConfigParsing:
    def write_config(self, tmp_path, text):
        path = tmp_path / "train.cfg"
        path.write_text(text)
        return path

    def test_full_config(self, tmp_path):
        path = self.write_config(
            tmp_path,
            "# comment\n"
            "lambda = 0.02\nlearning_rate = 2e-4\nbatch_size = 4\npatch_size = 128\n"
            "iterations = 10\nseed = 3\nlog_interval = 5\nvariant = deepened\n"
            "n_channels = 12\nm_channels = 16\ndeepen_hyper = true\n"
            "dataset_dir = /data/in\nout_dir = /data/out\n",
        )
        cfg, dataset_dir, out_dir = cli.parse_config(path)
        assert cfg.rd_lambda == 0.02 and cfg.batch_size == 4 and cfg.patch_size == 128
        assert cfg.arch.variant == "deepened" and cfg.arch.deepen_hyper is True
        assert str(dataset_dir) == "/data/in" and str(out_dir) == "/data/out"

    def test_unknown_keys_listed(self, tmp_path):
        path = self.write_config(
            tmp_path, "dataset_dir=/x\nout_dir=/y\nlr=1\nmomentum=0.9\niterations=1\n"
        )
        with pytest.raises(ValueError, match="unknown config keys: lr, momentum"):
            cli.parse_config(path)

    def test_missing_dataset_dir(self, tmp_path):
        path = self.write_config(tmp_path, "out_dir=/y\niterations=1\n")
        with pytest.raises(ValueError, match="dataset_dir"):
            cli.parse_config(path)

    def test_malformed_line(self, tmp_path):
        path = self.write_config(tmp_path, "iterations 5\n")
        with pytest.raises(ValueError, match="key=value"):
            cli.parse_config(path)


class TestEncodeDecode:
    def test_batch_encode_decode_round_trip(self, tmp_path, tiny_model, model_file):
        img_paths = write_images(tmp_path / "in", count=3)
        rc = cli.main(
            ["encode", "--model", str(model_file), "--out", str(tmp_path / "enc")]
            + [str(p) for p in img_paths]
        )
        assert rc == 0
        streams = sorted((tmp_path / "enc").glob("*.icae"))
        assert len(streams) == 3
        rc = cli.main(
            ["decode", "--model", str(model_file), "--out", str(tmp_path / "dec")]
            + [str(p) for p in streams]
        )
        assert rc == 0
        for src in img_paths:
            out = tmp_path / "dec" / (src.stem + ".png")
            assert out.exists()
            assert Image.open(out).size == Image.open(src).size

    def test_alpha_input_fails_batch_continues(self, tmp_path, model_file, capsys):
        img_paths = write_images(tmp_path / "in", count=2)
        rgba = tmp_path / "in" / "bad.png"
        Image.new("RGBA", (70, 70)).save(rgba)
        rc = cli.main(
            ["encode", "--model", str(model_file), "--out", str(tmp_path / "enc")]
            + [str(img_paths[0]), str(rgba), str(img_paths[1])]
        )
        assert rc == 1
        err = capsys.readouterr().err
        assert "alpha channel unsupported" in err
        assert len(list((tmp_path / "enc").glob("*.icae"))) == 2

    def test_timing_excludes_io_via_injected_clock(self, tmp_path, tiny_model):
        img_paths = write_images(tmp_path / "in", count=3)
        clock = FakeClock()
        results = cli.run_encode(tiny_model, img_paths, tmp_path / "enc", clock=clock)
        assert all(r.ok for r in results)
        # exactly two clock reads per file, around the compress call only
        assert clock.calls == 2 * len(results)
        assert all(r.seconds == 1.0 for r in results)

        streams = sorted((tmp_path / "enc").glob("*.icae"))
        clock = FakeClock()
        results = cli.run_decode(tiny_model, streams, tmp_path / "dec", clock=clock)
        assert all(r.ok for r in results)
        assert clock.calls == 2 * len(results)
        assert all(r.seconds == 1.0 for r in results)

    def test_batch_equals_single_invocations(self, tmp_path, tiny_model):
        img_paths = write_images(tmp_path / "in", count=3, seed=5)
        cli.run_encode(tiny_model, img_paths, tmp_path / "batch")
        for p in img_paths:
            cli.run_encode(tiny_model, [p], tmp_path / "single")
        for p in img_paths:
            a = (tmp_path / "batch" / (p.stem + ".icae")).read_bytes()
            b = (tmp_path / "single" / (p.stem + ".icae")).read_bytes()
            assert a == b

    def test_corrupt_stream_no_output_file(self, tmp_path, tiny_model, model_file):
        img_paths = write_images(tmp_path / "in", count=1)
        cli.run_encode(tiny_model, img_paths, tmp_path / "enc")
        stream_path = next((tmp_path / "enc").glob("*.icae"))
        data = bytearray(stream_path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        bad = tmp_path / "bad.icae"
        bad.write_bytes(bytes(data))
        rc = cli.main(["decode", "--model", str(model_file), "--out", str(tmp_path / "dec"), str(bad)])
        assert rc == 1
        assert not (tmp_path / "dec" / "bad.png").exists()

    def test_missing_file_reports_error(self, tmp_path, model_file):
        rc = cli.main(
            ["encode", "--model", str(model_file), "--out", str(tmp_path / "enc"), "missing.png"]
        )
        assert rc == 1

    def test_missing_checkpoint_reports_error(self, tmp_path, capsys):
        rc = cli.main(["encode", "--model", str(tmp_path / "no.ckpt"), "--out", str(tmp_path), "x.png"])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_file_streams_match_in_memory_path(self, tmp_path, tiny_model):
        from icae import codec
        from icae.entropy import round_half_away
        from icae.images import load_rgb8, to_unit_float
        from icae.transforms import forward

        img_paths = write_images(tmp_path / "in", count=1, seed=13)
        cli.run_encode(tiny_model, img_paths, tmp_path / "enc")
        stream = (tmp_path / "enc" / (img_paths[0].stem + ".icae")).read_bytes()

        rgb01 = to_unit_float(load_rgb8(img_paths[0]))
        assert stream == codec.encode_array(rgb01, tiny_model)

        x = codec._to_nchw(codec.pad_image(rgb01))
        y = forward(tiny_model.analysis, x)
        z = forward(tiny_model.hyper_analysis, y)
        _, y_dec, z_dec = codec.decode_latents(stream, tiny_model)
        np.testing.assert_array_equal(y_dec, round_half_away(y.data).astype(np.int64))
        np.testing.assert_array_equal(z_dec, round_half_away(z.data).astype(np.int64))

    def test_jobs_flag_matches_sequential(self, tmp_path, tiny_model):
        img_paths = write_images(tmp_path / "in", count=4, seed=9)
        cli.run_encode(tiny_model, img_paths, tmp_path / "seq", jobs=1)
        cli.run_encode(tiny_model, img_paths, tmp_path / "par", jobs=3)
        for p in img_paths:
            assert (tmp_path / "seq" / (p.stem + ".icae")).read_bytes() == (
                tmp_path / "par" / (p.stem + ".icae")
            ).read_bytes()

    def test_csv_written(self, tmp_path, model_file):
        img_paths = write_images(tmp_path / "in", count=2)
        csv_path = tmp_path / "times.csv"
        rc = cli.main(
            ["encode", "--model", str(model_file), "--out", str(tmp_path / "enc"),
             "--csv", str(csv_path)] + [str(p) for p in img_paths]
        )
        assert rc == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "name,encode_s"
        assert lines[-1].startswith("mean,")


class TestEval:
    def test_external_identical_pair(self, tmp_path, capsys):
        img_paths = write_images(tmp_path / "orig", count=2, size=(180, 180), seed=3)
        recon_dir = tmp_path / "recon"
        recon_dir.mkdir()
        for p in img_paths:
            (recon_dir / p.name).write_bytes(p.read_bytes())
        rc = cli.main(
            ["eval", "--out", str(tmp_path / "out"), "--external", str(recon_dir)]
            + [str(p) for p in img_paths]
        )
        assert rc == 0
        csv = (tmp_path / "out" / "report.csv").read_text()
        rows = csv.splitlines()
        assert rows[0] == "name,bpp,psnr_db,ms_ssim,encode_s,decode_s"
        for line in rows[1:]:
            name, _, psnr_db, ms, _, _ = line.split(",")
            assert float(psnr_db) == 100.0
            assert float(ms) == 1.0

    def test_external_bpp_from_sibling_artifact(self, tmp_path):
        img_paths = write_images(tmp_path / "orig", count=1, size=(180, 180), seed=4)
        recon_dir = tmp_path / "recon"
        recon_dir.mkdir()
        (recon_dir / img_paths[0].name).write_bytes(img_paths[0].read_bytes())
        (recon_dir / (img_paths[0].stem + ".j2k")).write_bytes(b"\x00" * 4050)
        results = cli.run_eval(None, img_paths, tmp_path / "out", external_dir=recon_dir)
        row = results[0].row
        assert row.bpp == pytest.approx(8 * 4050 / (180 * 180))

    def test_codec_eval_report(self, tmp_path, smoke_run):
        _, model, _ = smoke_run
        model_path = tmp_path / "m.ckpt"
        model.save(model_path)
        img_paths = write_images(tmp_path / "in", count=3, size=(180, 200), seed=6)
        rc = cli.main(
            ["eval", "--model", str(model_path), "--out", str(tmp_path / "out")]
            + [str(p) for p in img_paths]
        )
        assert rc == 0
        lines = (tmp_path / "out" / "report.csv").read_text().splitlines()
        assert len(lines) == 1 + 3 + 1
        assert lines[-1].startswith("average,")
        for line in lines[1:]:
            parts = line.split(",")
            assert float(parts[1]) > 0  # bpp
            assert 0.0 <= float(parts[3]) <= 1.0

    def test_eval_requires_model_without_external(self, tmp_path):
        rc = cli.main(["eval", "--out", str(tmp_path), "x.png"])
        assert rc == 2

    def test_reference_note_printed(self, tmp_path, capsys, smoke_run):
        _, model, _ = smoke_run
        model_path = tmp_path / "m.ckpt"
        model.save(model_path)
        img_paths = write_images(tmp_path / "in", count=1, size=(180, 180), seed=8)
        cli.main(["eval", "--model", str(model_path), "--out", str(tmp_path / "out"), str(img_paths[0])])
        out = capsys.readouterr().out
        assert "0.4242" in out and "0.4419" in out  # documentation values, not assertions


class TestTrainCmd:
    def test_train_writes_artifacts_and_replays(self, tmp_path, smoke_dataset):
        from icae.images import save_png, to_uint8

        data_dir = tmp_path / "data"
        data_dir.mkdir()
        for i, img in enumerate(smoke_dataset[:4]):
            save_png(data_dir / f"t{i}.png", to_uint8(img))
        cfg_text = (
            f"dataset_dir = {data_dir}\nout_dir = {tmp_path / 'run1'}\n"
            "iterations = 4\nbatch_size = 2\npatch_size = 64\nseed = 5\nlog_interval = 1\n"
            "n_channels = 4\nm_channels = 4\n"
        )
        cfg_file = tmp_path / "train.cfg"
        cfg_file.write_text(cfg_text)
        rc = cli.main(["train", "--config", str(cfg_file)])
        assert rc == 0
        run1 = tmp_path / "run1"
        assert (run1 / "model.ckpt").exists()
        assert (run1 / "run_manifest.json").exists()
        curve1 = (run1 / "curve.csv").read_text()
        iters = [int(line.split(",")[0]) for line in curve1.splitlines()[1:]]
        assert iters == sorted(iters) and len(set(iters)) == len(iters)

        cfg_file.write_text(cfg_text.replace("run1", "run2"))
        assert cli.main(["train", "--config", str(cfg_file)]) == 0
        assert curve1 == (tmp_path / "run2" / "curve.csv").read_text()
        assert (run1 / "model.ckpt").read_bytes() == (tmp_path / "run2" / "model.ckpt").read_bytes()

    def test_missing_dataset_dir_fails_early(self, tmp_path, capsys):
        cfg_file = tmp_path / "train.cfg"
        cfg_file.write_text(f"dataset_dir = {tmp_path}/nope\nout_dir = {tmp_path}/out\niterations = 1\n")
        rc = cli.main(["train", "--config", str(cfg_file)])
        assert rc == 1
        assert "dataset directory not found" in capsys.readouterr().err
        assert not (tmp_path / "out").exists()
