import json

import pytest

from audiocap import cli, fluency
from audiocap.data import parse_manifest
from conftest import tiny_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthetic corpus plus a briefly trained tiny checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert cli.main(["synth", "--out", str(corpus), "--n", "3",
                     "--seed", "5"]) == 0
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(tiny_config(seed=1).to_dict()))
    ckpt_path = root / "model.ckpt"
    rc = cli.main(["train", "--manifest", str(corpus / "manifest.jsonl"),
                   "--config", str(cfg_path), "--out", str(ckpt_path),
                   "--max-steps", "4"])
    assert rc == 0
    return {"root": root, "corpus": corpus, "cfg": cfg_path,
            "ckpt": ckpt_path}


class TestSynth:
    def test_outputs(self, workdir):
        entries = parse_manifest(workdir["corpus"] / "manifest.jsonl")
        assert len(entries) == 3
        for e in entries:
            assert (workdir["corpus"] / e.audio).exists()


class TestTrain:
    def test_checkpoint_and_losses_written(self, workdir):
        assert workdir["ckpt"].exists()
        losses = json.loads(
            (workdir["root"] / "model.ckpt.losses.json").read_text())
        assert len(losses["losses"]) == 4
        assert losses["stage_boundaries"] == [0]

    def test_dump_config_applies_overrides(self, capsys):
        rc = cli.main(["train", "--dump-config", "--strategy", "lora",
                       "--seed", "9"])
        assert rc == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["strategy"] == {"encoder": "lora", "decoder": "lora"}
        assert doc["seed"] == 9
        assert doc["bridge"]["window"] == 17

    def test_missing_manifest_flag_is_usage_error(self, workdir):
        assert cli.main(["train", "--out", "x.ckpt"]) == 1

    def test_nonexistent_manifest_is_data_error(self, workdir, tmp_path):
        rc = cli.main(["train", "--manifest", str(tmp_path / "no.jsonl"),
                       "--out", str(tmp_path / "x.ckpt")])
        assert rc == 2

    def test_duplicate_ids_across_manifests(self, workdir, tmp_path):
        m = workdir["corpus"] / "manifest.jsonl"
        rc = cli.main(["train", "--manifest", str(m), "--manifest", str(m),
                       "--out", str(tmp_path / "x.ckpt")])
        assert rc == 2


class TestCaption:
    def test_caption_prints_line(self, workdir, capsys):
        wav = workdir["corpus"] / "clip_0000.wav"
        rc = cli.main(["caption", "--ckpt", str(workdir["ckpt"]),
                       "--wav", str(wav)])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.endswith("\n")

    def test_default_beam_equals_beam_one(self, workdir, capsys):
        wav = workdir["corpus"] / "clip_0001.wav"
        base = ["caption", "--ckpt", str(workdir["ckpt"]), "--wav", str(wav)]
        assert cli.main(base) == 0
        first = capsys.readouterr().out
        assert cli.main(base + ["--beam", "1"]) == 0
        second = capsys.readouterr().out
        assert first == second

    def test_missing_checkpoint_is_data_error(self, workdir, tmp_path):
        wav = workdir["corpus"] / "clip_0000.wav"
        rc = cli.main(["caption", "--ckpt", str(tmp_path / "no.ckpt"),
                       "--wav", str(wav)])
        assert rc == 2

    def test_corrupt_checkpoint_is_data_error(self, workdir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"JUNK" + bytes(64))
        wav = workdir["corpus"] / "clip_0000.wav"
        rc = cli.main(["caption", "--ckpt", str(bad), "--wav", str(wav)])
        assert rc == 2

    def test_non_wav_input_is_data_error(self, workdir, tmp_path):
        txt = tmp_path / "not.wav"
        txt.write_text("hello")
        rc = cli.main(["caption", "--ckpt", str(workdir["ckpt"]),
                       "--wav", str(txt)])
        assert rc == 2


class TestEvaluate:
    def test_report_without_spice(self, workdir, tmp_path, capsys):
        out = tmp_path / "report.json"
        rc = cli.main(["evaluate", "--ckpt", str(workdir["ckpt"]),
                       "--manifest", str(workdir["corpus"] / "manifest.jsonl"),
                       "--out", str(out)])
        assert rc == 0
        summary = json.loads(capsys.readouterr().out)
        assert "cider_d" in summary
        report = json.loads(out.read_text())
        assert report["flags"]["spice"] == "absent"
        assert report["flags"]["spider_fl"] == "absent"
        assert report["flags"]["fluency"] == "computed"
        assert len(report["items"]) == 3

    def test_report_with_spice(self, workdir, tmp_path, capsys):
        entries = parse_manifest(workdir["corpus"] / "manifest.jsonl")
        spice = tmp_path / "spice.jsonl"
        spice.write_text("".join(
            json.dumps({"id": e.id, "spice": 0.25}) + "\n" for e in entries))
        out = tmp_path / "report.json"
        rc = cli.main(["evaluate", "--ckpt", str(workdir["ckpt"]),
                       "--manifest", str(workdir["corpus"] / "manifest.jsonl"),
                       "--spice", str(spice), "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        assert report["flags"]["spice"] == "supplied"
        assert report["flags"]["spider"] == "computed"
        assert "spider_fl" in report["corpus"]
        capsys.readouterr()


class TestScore:
    def write_corpus(self, tmp_path):
        cands = tmp_path / "cands.jsonl"
        refs = tmp_path / "refs.jsonl"
        cands.write_text(
            json.dumps({"id": "a", "caption": "a dog barks"}) + "\n"
            + json.dumps({"id": "b", "caption": "rain falls"}) + "\n")
        refs.write_text(
            json.dumps({"id": "b", "captions": ["rain falls"]}) + "\n"
            + json.dumps({"id": "a", "captions": ["a dog barks"]}) + "\n")
        return cands, refs

    def test_round_trip_with_spice(self, tmp_path, capsys):
        cands, refs = self.write_corpus(tmp_path)
        spice = tmp_path / "spice.jsonl"
        spice.write_text('{"id": "a", "spice": 0.5}\n{"id": "b", "spice": 0.1}\n')
        out = tmp_path / "report.json"
        rc = cli.main(["score", "--candidates", str(cands),
                       "--references", str(refs), "--spice", str(spice),
                       "--out", str(out)])
        assert rc == 0
        report = json.loads(out.read_text())
        # items follow the references file order
        assert [it["id"] for it in report["items"]] == ["b", "a"]
        assert "spider_fl" in report["corpus"]
        summary = json.loads(capsys.readouterr().out)
        assert summary == report["corpus"]

    def test_id_mismatch_is_data_error(self, tmp_path, capsys):
        cands, refs = self.write_corpus(tmp_path)
        refs.write_text(json.dumps({"id": "zzz", "captions": ["x y"]}) + "\n")
        rc = cli.main(["score", "--candidates", str(cands),
                       "--references", str(refs),
                       "--out", str(tmp_path / "r.json")])
        assert rc == 2
        capsys.readouterr()

    def test_empty_corpus_is_data_error(self, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        rc = cli.main(["score", "--candidates", str(empty),
                       "--references", str(empty),
                       "--out", str(tmp_path / "r.json")])
        assert rc == 2
        capsys.readouterr()


class TestCorrect:
    def test_trailing_conjunction_example(self, capsys):
        rc = cli.main(["correct", "--text", "a man speaks and"])
        assert rc == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "a man speaks"
        doc = json.loads(lines[1])
        assert doc["corrected"] is True
        assert doc["pre"]["rules"] == ["R2"]
        assert doc["post"]["rules"] == []

    def test_clean_text_untouched(self, capsys):
        rc = cli.main(["correct", "--text", "rain falls on a tin roof"])
        assert rc == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "rain falls on a tin roof"
        assert json.loads(lines[1])["corrected"] is False

    def test_unreachable_endpoint_is_external_error(self, capsys, monkeypatch):
        monkeypatch.setattr(fluency.time, "sleep", lambda s: None)
        rc = cli.main(["correct", "--text", "a man speaks and",
                       "--endpoint", "http://127.0.0.1:9/v1",
                       "--mode", "external"])
        assert rc == 4
        capsys.readouterr()

    def test_fallback_mode_recovers(self, capsys, monkeypatch):
        monkeypatch.setattr(fluency.time, "sleep", lambda s: None)
        rc = cli.main(["correct", "--text", "a man speaks and",
                       "--endpoint", "http://127.0.0.1:9/v1"])
        assert rc == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "a man speaks"
        assert json.loads(lines[1])["warnings"]


class TestUsage:
    def test_no_command(self, capsys):
        assert cli.main([]) == 1
        capsys.readouterr()

    def test_unknown_flag(self, capsys):
        assert cli.main(["synth", "--wat", "1"]) == 1
        capsys.readouterr()

    def test_unknown_command(self, capsys):
        assert cli.main(["transmogrify"]) == 1
        capsys.readouterr()

    def test_bad_int(self, capsys):
        assert cli.main(["synth", "--out", "x", "--n", "lots"]) == 1
        capsys.readouterr()


class TestSelftest:
    def test_passes(self, capsys):
        assert cli.main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert out.count("PASS") >= 7
