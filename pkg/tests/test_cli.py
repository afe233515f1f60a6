import csv
import json

import numpy as np
import pytest

from noisecodec.cli import main
from noisecodec.codec.checkpoint import save_model
from noisecodec.codec.model import ArchConfig, CodecModel
from noisecodec.evaluate import CSV_COLUMNS, evaluate_rd, record_seed
from noisecodec.imageio import read_image, write_image

ARCH = dict(N=8, latent_channels=8, hyper_channels=8, hyper_strides=(1, 1))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(0)
    images = root / "images"
    images.mkdir()
    write_image(images / "a.png", rng.uniform(size=(3, 40, 36)))
    write_image(images / "b.ppm", rng.uniform(size=(3, 33, 48)))
    for q in ("q2", "q5"):
        save_model(CodecModel(ArchConfig(**ARCH), q, "mse", seed=int(q[1])), root / f"{q}.jdcm")
    return root


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert main(["compress", "--model", "x"]) == 1
        assert main(["nonsense"]) == 1
        assert main([]) == 1

    def test_missing_input_is_data_error(self, workspace, tmp_path):
        code = main(["compress", "--model", str(workspace / "q2.jdcm"), "--input", str(tmp_path / "no.png"),
                     "--output", str(tmp_path / "o.jdc")])
        assert code == 2

    def test_bad_checkpoint_is_data_error(self, workspace, tmp_path):
        (tmp_path / "bad.jdcm").write_bytes(b"garbage")
        code = main(["compress", "--model", str(tmp_path / "bad.jdcm"), "--input",
                     str(workspace / "images" / "a.png"), "--output", str(tmp_path / "o.jdc")])
        assert code == 2

    def test_bad_thread_cap(self, monkeypatch, workspace, tmp_path):
        monkeypatch.setenv("NOISECODEC_THREADS", "zero")
        assert main(["textures", "--out", str(tmp_path), "--count", "1"]) == 1


class TestCodecCommands:
    def test_round_trip_and_guard(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("NOISECODEC_THREADS", "1")
        src = workspace / "images" / "a.png"
        jdc = tmp_path / "a.jdc"
        args = ["--model", str(workspace / "q2.jdcm")]
        assert main(["compress", *args, "--input", str(src), "--output", str(jdc)]) == 0
        assert jdc.read_bytes()[:4] == b"JDCB"
        assert main(["decompress", *args, "--input", str(jdc), "--output", str(tmp_path / "a.png")]) == 0
        assert read_image(tmp_path / "a.png").shape == (3, 40, 36)
        # the same image compressed twice gives the same file
        assert main(["compress", *args, "--input", str(src), "--output", str(tmp_path / "b.jdc")]) == 0
        assert (tmp_path / "b.jdc").read_bytes() == jdc.read_bytes()
        # a checkpoint of another quality refuses the stream
        code = main(["decompress", "--model", str(workspace / "q5.jdcm"), "--input", str(jdc),
                     "--output", str(tmp_path / "c.png")])
        assert code == 2

    def test_corrupt_stream(self, workspace, tmp_path):
        src = workspace / "images" / "b.ppm"
        jdc = tmp_path / "b.jdc"
        model = ["--model", str(workspace / "q2.jdcm")]
        assert main(["compress", *model, "--input", str(src), "--output", str(jdc)]) == 0
        raw = bytearray(jdc.read_bytes())
        raw[-8] ^= 1
        jdc.write_bytes(bytes(raw))
        assert main(["decompress", *model, "--input", str(jdc), "--output", str(tmp_path / "x.png")]) == 2

    def test_synth_noise(self, workspace, tmp_path):
        src = str(workspace / "images" / "a.png")
        for name in ("n1.png", "n2.png"):
            assert main(["synth-noise", "--input", src, "--output", str(tmp_path / name), "--preset", "gain8",
                         "--seed", "5"]) == 0
        assert (tmp_path / "n1.png").read_bytes() == (tmp_path / "n2.png").read_bytes()
        assert main(["synth-noise", "--input", src, "--output", str(tmp_path / "n3.png")]) == 1

    def test_textures(self, tmp_path):
        assert main(["textures", "--out", str(tmp_path / "t"), "--count", "3", "--size", "32"]) == 0
        assert len(list((tmp_path / "t").glob("*.png"))) == 3


class TestEvaluate:
    def test_counts_and_order(self, workspace, tmp_path):
        out = tmp_path / "rd.csv"
        records = evaluate_rd(workspace / "images", [workspace / "q5.jdcm", workspace / "q2.jdcm"],
                              ["gain1", "gain2", "gain4", "gain8"], out, seed=3, summary_json=tmp_path / "s.json")
        assert len(records) == 16 and all(r.ok for r in records)
        with out.open() as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == CSV_COLUMNS
        body = rows[1:]
        assert all(len(r) == len(CSV_COLUMNS) for r in body)
        kinds = [r[0] for r in body]
        assert kinds.count("record") == 16 and kinds.count("mean") == 8
        keys = [(r[2], r[3], r[1]) for r in body if r[0] == "record"]
        assert keys == sorted(keys)
        summary = json.loads((tmp_path / "s.json").read_text())
        assert summary["records"] == 16 and summary["failed"] == 0

    def test_bpp_from_file_size(self, workspace, tmp_path):
        from noisecodec.codec.checkpoint import load_model
        from noisecodec.codec.pipeline import compress_image
        from noisecodec.evaluate import PRESETS
        from noisecodec.noise import synthesize_noise

        rec = evaluate_rd(workspace / "images", [workspace / "q2.jdcm"], ["gain4"], seed=1)[0]
        clean = read_image(workspace / "images" / f"{rec.image}.png")
        noisy = synthesize_noise(clean, PRESETS["gain4"], record_seed(1, rec.image, "gain4"))
        stream, _ = compress_image(load_model(workspace / "q2.jdcm")[0], noisy)
        assert rec.bpp == 8 * len(stream) / (40 * 36)

    def test_reproducible_csv(self, workspace, tmp_path):
        args = dict(presets=["gain8", "clean"], seed=11)
        for name in ("a.csv", "b.csv"):
            evaluate_rd(workspace / "images", [workspace / "q2.jdcm"], out_csv=tmp_path / name, **args)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_cli_eval(self, workspace, tmp_path):
        code = main(["eval", "--data", str(workspace / "images"), "--models", str(workspace / "q2.jdcm"),
                     "--presets", "gain1", "--out", str(tmp_path / "e.csv")])
        assert code == 0 and (tmp_path / "e.csv").exists()

    def test_unreadable_images_become_error_rows(self, workspace, tmp_path):
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "x.png").write_bytes(b"nope")
        records = evaluate_rd(bad, [workspace / "q2.jdcm"], ["gain1"], tmp_path / "e.csv")
        assert len(records) == 1 and not records[0].ok
        code = main(["eval", "--data", str(bad), "--models", str(workspace / "q2.jdcm"), "--presets", "gain1",
                     "--out", str(tmp_path / "e2.csv")])
        assert code == 2

    def test_unknown_preset(self, workspace):
        with pytest.raises(ValueError):
            evaluate_rd(workspace / "images", [workspace / "q2.jdcm"], ["gain3"])


class TestTrainingCommands:
    def test_pretrain_then_finetune(self, tmp_path):
        cfg = {"epochs": 2, "batch_size": 2, "steps_per_epoch": 2, "warmup_epochs": 1, "lr": 1e-3,
               "lr_decay_epochs": [], "arch": {"N": 8, "latent_channels": 8, "hyper_channels": 8}}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert main(["textures", "--out", str(tmp_path / "data"), "--count", "4"]) == 0
        common = ["--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "data"), "--quality", "q2",
                  "--metric", "mse", "--seed", "4"]
        assert main(["pretrain", *common, "--out", str(tmp_path / "pre")]) == 0
        assert (tmp_path / "pre" / "last.jdcm").exists()
        assert len((tmp_path / "pre" / "log.csv").read_text().splitlines()) == 3
        assert main(["finetune", *common, "--out", str(tmp_path / "ft")]) == 1
        assert main(["finetune", *common, "--out", str(tmp_path / "ft"),
                     "--pretrained", str(tmp_path / "pre" / "last.jdcm")]) == 0
        wrong = [c if c != "q2" else "q3" for c in common]
        assert main(["finetune", *wrong, "--out", str(tmp_path / "ft2"),
                     "--pretrained", str(tmp_path / "pre" / "last.jdcm")]) == 2
