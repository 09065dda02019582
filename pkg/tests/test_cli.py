import json

import numpy as np
import pytest

from lasskit.audio import AudioClip, read_wav, write_wav
from lasskit.cli import EXIT_INVALID, EXIT_OK, EXIT_PARTIAL, main, parse_args
from lasskit.corpus import CorpusItem, write_manifest
from lasskit.metrics import sdri
from lasskit.mixing import mix_at_snr


def wav(path, samples, sr=8000):
    write_wav(path, AudioClip(np.asarray(samples, dtype=np.float64), sr))
    return str(path)


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_toy")
    assert main(["toy-corpus", "--out", str(out), "--per-class", "3", "--clip-seconds", "1.5", "-q"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def bench_set(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_set") / "toy0db"
    argv = ["bench-build", "--manifest", str(toy_dir / "manifest.jsonl"), "--protocol", "0db"]
    assert main(argv + ["--out", str(out), "--per-class", "3", "--seg-seconds", "1", "-q"]) == EXIT_OK
    return out


class TestMix:
    def test_sidecar_and_outputs(self, tmp_path, rng):
        t = wav(tmp_path / "t.wav", rng.standard_normal(8000) * 0.1)
        i = wav(tmp_path / "i.wav", rng.standard_normal(6000) * 0.3)
        assert main(["mix", t, i, "--snr", "-5", "--out", str(tmp_path / "o"), "--seed", "3"]) == EXIT_OK
        side = json.loads((tmp_path / "o/mix.json").read_text())
        assert side["measured_snr_db"] == pytest.approx(-5.0, abs=1e-4)
        assert side["seed"] == 3 and side["alpha"] > 0
        assert len(read_wav(tmp_path / "o/mixture.wav")) == 8000
        run = json.loads((tmp_path / "o/run.json").read_text())
        assert run["command"] == "mix" and run["seed"] == 3 and "torch" in run["versions"]

    def test_silent_input(self, tmp_path, rng, capsys):
        t = wav(tmp_path / "t.wav", np.zeros(8000))
        i = wav(tmp_path / "i.wav", rng.standard_normal(8000))
        assert main(["mix", t, i, "--snr", "0", "--out", str(tmp_path / "o")]) == EXIT_INVALID
        assert "SilentSource" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["mix", "nope.wav", "nope2.wav", "--snr", "0", "--out", str(tmp_path)]) == EXIT_INVALID

    def test_missing_required_flag(self, tmp_path):
        assert main(["mix", "a.wav", "b.wav", "--out", str(tmp_path)]) == EXIT_INVALID


class TestSeedAndConfig:
    def test_env_seed(self, monkeypatch):
        monkeypatch.setenv("LASSKIT_SEED", "41")
        assert parse_args(["grad-check"]).seed == 41

    def test_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv("LASSKIT_SEED", "41")
        assert parse_args(["grad-check", "--seed", "5"]).seed == 5

    def test_default_seed(self, monkeypatch):
        monkeypatch.delenv("LASSKIT_SEED", raising=False)
        assert parse_args(["grad-check"]).seed == 0

    def test_config_then_flag(self, tmp_path, monkeypatch):
        monkeypatch.delenv("LASSKIT_SEED", raising=False)
        cfg = tmp_path / "c.ini"
        cfg.write_text("[global]\nseed = 9\n[train]\nmanifest = m.jsonl\nout = o\nmax-steps = 7\nchannels = 4,8\n")
        args = parse_args(["train", "--config", str(cfg)])
        assert (args.seed, args.max_steps, args.channels, args.manifest) == (9, 7, (4, 8), "m.jsonl")
        args = parse_args(["train", "--config", str(cfg), "--max-steps", "3", "--seed", "1"])
        assert (args.seed, args.max_steps) == (1, 3)

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[grad-check]\nbogus = 1\n")
        assert main(["grad-check", "--config", str(cfg)]) == EXIT_INVALID

    def test_bad_env_seed(self, monkeypatch):
        monkeypatch.setenv("LASSKIT_SEED", "x")
        assert main(["grad-check", "--n-params", "1"]) == EXIT_INVALID


class TestBenchBuild:
    def test_invalid_protocol_lists_choices(self, toy_dir, tmp_path, capsys):
        argv = ["bench-build", "--manifest", str(toy_dir / "manifest.jsonl"), "--protocol", "bogus", "--out", str(tmp_path)]
        assert main(argv) == EXIT_INVALID
        assert "snr_range" in capsys.readouterr().err

    def test_set_written(self, bench_set):
        doc = json.loads((bench_set / "set.json").read_text())
        assert doc["count"] == 6 and (bench_set / "run.json").is_file()

    def test_lufs_requires_clean_ids(self, toy_dir, tmp_path):
        argv = ["bench-build", "--manifest", str(toy_dir / "manifest.jsonl"), "--protocol", "lufs", "--out", str(tmp_path)]
        assert main(argv) == EXIT_INVALID

    def test_partial_build_exits_one(self, tmp_path, rng):
        items = []
        for i, lab in enumerate(["a", "a", "b"]):
            wav(tmp_path / f"c{i}.wav", rng.standard_normal(8000) * 0.1)
            items.append(CorpusItem(f"c{i}", f"c{i}.wav", (lab,), (f"a sound of {lab}",), 1.0, 8000))
        write_manifest(tmp_path / "m.jsonl", items)
        argv = ["bench-build", "--manifest", str(tmp_path / "m.jsonl"), "--protocol", "caption", "-q"]
        assert main(argv + ["--out", str(tmp_path / "c"), "--n-per", "2"]) == EXIT_OK
        # relabel so no item has a label-disjoint background left
        items[2] = CorpusItem("c2", "c2.wav", ("a",), ("x",), 1.0, 8000)
        write_manifest(tmp_path / "m.jsonl", items)
        assert main(argv + ["--out", str(tmp_path / "d"), "--n-per", "2"]) == EXIT_PARTIAL


class TestEvaluate:
    def _run(self, bench_set, out, *extra):
        return main(["evaluate", "--set", f"toy={bench_set}", "--out", str(out), "-q", *extra])

    def test_passthrough_and_oracle(self, bench_set, tmp_path, capsys):
        assert self._run(bench_set, tmp_path / "p", "--passthrough") == EXIT_OK
        rep = json.loads((tmp_path / "p/report.json").read_text())
        assert rep["reports"]["toy"]["aggregate"]["sdri_db"]["mean"] == 0.0
        assert self._run(bench_set, tmp_path / "o", "--oracle") == EXIT_OK
        rep = json.loads((tmp_path / "o/report.json").read_text())
        assert rep["reports"]["toy"]["aggregate"]["sdri_db"]["mean"] > 15.0
        assert "| oracle |" in (tmp_path / "o/report.md").read_text()
        assert (tmp_path / "o/report.csv").read_text().startswith("dataset,id,")

    def test_jobs_give_identical_reports(self, bench_set, tmp_path):
        assert self._run(bench_set, tmp_path / "a", "--oracle", "--jobs", "1") == EXIT_OK
        assert self._run(bench_set, tmp_path / "b", "--oracle", "--jobs", "8") == EXIT_OK
        for name in ("report.json", "report.csv", "report.md"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_not_a_set(self, tmp_path):
        assert self._run(tmp_path, tmp_path / "o", "--oracle") == EXIT_INVALID

    def test_missing_checkpoint(self, bench_set, tmp_path):
        assert self._run(bench_set, tmp_path / "o", "--checkpoint", str(tmp_path / "x.ckpt")) == EXIT_INVALID

    def test_requires_a_system(self, bench_set, tmp_path):
        assert self._run(bench_set, tmp_path / "o") == EXIT_INVALID


class TestTrainAndSeparate:
    @pytest.fixture(scope="class")
    @classmethod
    def mixture(cls, toy_heldout, tmp_path_factory):
        out = tmp_path_factory.mktemp("cli_mix")
        tone = toy_heldout.audio(toy_heldout.items_with_label("tone")[0].id)
        noise = toy_heldout.audio(toy_heldout.items_with_label("noise")[0].id)
        n = min(len(tone), len(noise))
        res = mix_at_snr(AudioClip(tone.samples[:n], 8000), AudioClip(noise.samples[:n], 8000), 0.0)
        write_wav(out / "mix.wav", res.mixture)
        return out / "mix.wav", res

    def _separate(self, ckpt, mix_path, query, out, *extra):
        return main(["separate", "--checkpoint", str(ckpt), "--input", str(mix_path), "--query", query, "--out", str(out), "-q", *extra])

    def test_tone_query_improves_sdr(self, trained_toy, mixture, tmp_path):
        mix_path, res = mixture
        assert self._separate(trained_toy.best_checkpoint, mix_path, "tone", tmp_path / "tone.wav") == EXIT_OK
        est = read_wav(tmp_path / "tone.wav")
        mix = read_wav(mix_path)
        assert sdri(est.samples, mix.samples, res.target.samples) >= 5.0
        assert (tmp_path / "tone.wav.run.json").is_file()
        assert self._separate(trained_toy.best_checkpoint, mix_path, "noise", tmp_path / "noise.wav") == EXIT_OK
        assert not np.allclose(read_wav(tmp_path / "noise.wav").samples, est.samples, atol=1e-3)

    def test_unknown_query(self, trained_toy, mixture, tmp_path, capsys):
        assert self._separate(trained_toy.best_checkpoint, mixture[0], "dog barking", tmp_path / "x.wav") == EXIT_INVALID
        assert "UnknownQuery" in capsys.readouterr().err

    def test_external_embedding_and_import(self, trained_toy, mixture, tmp_path):
        vec = np.random.default_rng(0).standard_normal(64)
        src = tmp_path / "emb.jsonl"
        src.write_text(json.dumps({"key": "dog barking", "vec": vec.tolist()}) + "\n")
        assert main(["embed-import", "--input", str(src), "--out", str(tmp_path / "emb.npz"), "-q"]) == EXIT_OK
        for table in (src, tmp_path / "emb.npz"):
            out = tmp_path / f"{table.suffix[1:]}.wav"
            assert self._separate(trained_toy.best_checkpoint, mixture[0], "dog barking", out, "--embeddings", str(table)) == EXIT_OK
        a, b = read_wav(tmp_path / "jsonl.wav"), read_wav(tmp_path / "npz.wav")
        np.testing.assert_allclose(a.samples, b.samples, atol=1e-6)

    def test_embed_import_rejects_wrong_suffix(self, tmp_path):
        src = tmp_path / "emb.jsonl"
        src.write_text(json.dumps({"key": "a", "vec": [1.0, 0.0]}) + "\n")
        assert main(["embed-import", "--input", str(src), "--out", str(tmp_path / "emb.txt")]) == EXIT_INVALID

    def test_zero_steps_then_resume(self, toy_dir, tmp_path):
        common = ["train", "--manifest", str(toy_dir / "manifest.jsonl"), "--channels", "4,8", "--units-per-block", "1",
                  "--bottleneck-blocks", "1", "--d-query", "8", "--batch-size", "2", "--eval-every", "0", "-q"]
        assert main(common + ["--out", str(tmp_path / "init"), "--max-steps", "0"]) == EXIT_OK
        ckpts = list((tmp_path / "init").glob("*.ckpt"))
        assert ckpts
        assert main(common + ["--out", str(tmp_path / "full"), "--max-steps", "4"]) == EXIT_OK
        assert main(common + ["--out", str(tmp_path / "half"), "--max-steps", "2"]) == EXIT_OK
        half = sorted((tmp_path / "half").glob("*.ckpt"))[-1]
        assert main(common + ["--out", str(tmp_path / "rest"), "--max-steps", "4", "--resume", str(half)]) == EXIT_OK
        full = sorted((tmp_path / "full").glob("*.ckpt"))[-1]
        rest = sorted((tmp_path / "rest").glob("*.ckpt"))[-1]
        assert full.read_bytes() == rest.read_bytes()
        run = json.loads((tmp_path / "full/run.json").read_text())
        assert run["train_config"]["max_steps"] == 4


class TestGradCheck:
    def test_passes_and_negative_control(self, tmp_path, capsys):
        assert main(["grad-check", "--n-params", "40", "--out", str(tmp_path)]) == EXIT_OK
        assert json.loads((tmp_path / "grad_check.json").read_text())["passed"]
        capsys.readouterr()
        assert main(["grad-check", "--n-params", "40", "--corrupt", "3"]) == EXIT_PARTIAL
        assert not json.loads(capsys.readouterr().out)["passed"]
