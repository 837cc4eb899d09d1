import json
import subprocess
import sys

import numpy as np
import pytest

from fidelitykit.bench import EvalReport, load_manifest, save_manifest
from fidelitykit.cli import main
from fidelitykit.degrade import PairRecord
from fidelitykit.imgcore import Image, load_image, save_image
from fidelitykit.synthetic import build_corpus, textured_image

PY = sys.executable
IDENTITY = f"{PY} -m fidelitykit.refiners identity {{subject}} {{crop}} {{out}}"


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    build_corpus(d, n=3, seed=7)
    return d


@pytest.fixture(scope="module")
def refined(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("ref")
    assert main(["refine", "--manifest", str(corpus / "manifest.json"), "--refiner", IDENTITY,
                 "--out", str(out)]) == 0
    return out


@pytest.fixture
def png(tmp_path):
    p = tmp_path / "t.png"
    save_image(textured_image(160, seed=2), p)
    return p


class TestExitCodes:
    def test_usage_errors(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 1
        with pytest.raises(SystemExit) as info:
            main(["eval"])
        assert info.value.code == 1

    def test_missing_out_is_usage(self, corpus):
        assert main(["filter", "--manifest", str(corpus / "manifest.json")]) == 1

    def test_bad_manifest_is_data_error(self, tmp_path, capsys):
        p = tmp_path / "m.json"
        p.write_text('{"entries": [{"sample_id": "a"}]}')
        assert main(["eval", "--manifest", str(p)]) == 2
        assert "entries[0].subject_path" in capsys.readouterr().err

    def test_unreadable_image_is_data_error(self, tmp_path, png):
        (tmp_path / "x.png").write_text("nope")
        assert main(["match", str(png), str(tmp_path / "x.png")]) == 2

    def test_bad_config_is_data_error(self, tmp_path, png):
        (tmp_path / "c.json").write_text("{oops")
        assert main(["detect", str(png), "--config", str(tmp_path / "c.json")]) == 2

    def test_all_skipped(self, corpus, capsys):
        assert main(["eval", "--manifest", str(corpus / "manifest.json")]) == 3

    def test_module_entry_point(self):
        proc = subprocess.run([PY, "-m", "fidelitykit", "--version"], capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.startswith("fidelitykit ")


class TestCommands:
    def test_detect(self, png, tmp_path):
        assert main(["detect", str(png), "--out", str(tmp_path / "k.json")]) == 0
        doc = json.loads((tmp_path / "k.json").read_text())
        assert doc["pattern_version"] == "fk-brief256-v1" and len(doc["keypoints"]) > 0

    def test_match_self(self, png, tmp_path, capsys):
        assert main(["match", str(png), str(png), "--kind", "affine", "--out", str(tmp_path / "m.json")]) == 0
        counts = json.loads(capsys.readouterr().out)
        assert counts["count"] > 0 and counts["count"] <= counts["raw_count"]
        assert json.loads((tmp_path / "m.json").read_text())["count"] == counts["count"]

    def test_refine_outputs(self, refined):
        m = load_manifest(refined / "manifest.json")
        assert all(e.refined_path for e in m.entries)
        log = json.loads((refined / "refine_log.json").read_text())
        assert set(log["regions"]) == {"s000", "s001", "s002"} and log["skips"] == []

    def test_eval_report_and_tau(self, refined, tmp_path, capsys):
        out = tmp_path / "r.json"
        assert main(["eval", "--manifest", str(refined / "manifest.json"), "--out", str(out), "--tau", "-100"]) == 0
        assert "samples=3" in capsys.readouterr().out
        rep = EvalReport.load(out)
        assert rep.overall.tau == -100 and rep.overall.k_gain == 1.0

    def test_eval_embeddings(self, refined, tmp_path):
        d = tmp_path / "emb"
        d.mkdir()
        for role, v in (("subject", [1, 0]), ("refined", [0, 1])):
            (d / f"{role}.json").write_text(json.dumps({"image_id": f"s001:{role}", "values": v}))
        out = tmp_path / "r.json"
        assert main(["eval", "--manifest", str(refined / "manifest.json"), "--embeddings", f"dino={d}",
                     "--out", str(out)]) == 0
        by = {s.sample_id: s for s in EvalReport.load(out).samples}
        assert by["s001"].dino == pytest.approx(0.0) and by["s000"].dino is None
        assert main(["eval", "--manifest", str(refined / "manifest.json"), "--embeddings", "nope"]) == 1

    def test_scatter(self, refined, tmp_path):
        rep = tmp_path / "r.json"
        main(["eval", "--manifest", str(refined / "manifest.json"), "--out", str(rep)])
        assert main(["scatter", str(rep), "--out", str(tmp_path / "s.csv")]) == 0
        assert (tmp_path / "s.csv").read_text().startswith("sample_id,n_base,n_refined,aki\n")
        assert main(["scatter", str(rep), "--out", str(tmp_path / "s.txt"), "--format", "svg"]) == 0
        assert (tmp_path / "s.txt").read_text().startswith("<svg")
        assert main(["scatter", str(tmp_path / "none.json"), "--out", str(tmp_path / "s.csv")]) == 2

    def test_filter_and_subset(self, corpus, tmp_path):
        out = tmp_path / "kept.json"
        assert main(["filter", "--manifest", str(corpus / "manifest.json"), "--out", str(out),
                     "--min-matches", "1", "--subset", "2"]) == 0
        kept = load_manifest(out)
        assert len(kept) == 2 and kept.missing_files() == []
        log = json.loads((tmp_path / "kept_filter_log.json").read_text())
        assert log["min_matches"] == 1 and len(log["samples"]) == 3

    def test_crops(self, refined, tmp_path):
        assert main(["crops", "--manifest", str(refined / "manifest.json"), "--out", str(tmp_path / "c")]) == 0
        doc = json.loads((tmp_path / "c" / "crops.json").read_text())
        assert len(doc["entries"]) == 3

    def test_crops_all_skipped(self, corpus, tmp_path):
        save_image(Image(np.full((100, 100, 3), 0.5)), tmp_path / "flat.png")
        m = {"schema_version": "fk-manifest-v1", "entries": [
            {"sample_id": "f", "subject_path": str(corpus / "s000_subject.png"),
             "generated_path": str(tmp_path / "flat.png")}]}
        (tmp_path / "m.json").write_text(json.dumps(m))
        assert main(["crops", "--manifest", str(tmp_path / "m.json"), "--out", str(tmp_path / "c")]) == 3

    def test_refine_all_skipped(self, corpus, tmp_path):
        bad = f"{PY} -c \"import sys; sys.exit(1)\" {{subject}} {{crop}} {{out}}"
        assert main(["refine", "--manifest", str(corpus / "manifest.json"), "--refiner", bad,
                     "--out", str(tmp_path / "o")]) == 3

    def test_refine_bad_template(self, corpus, tmp_path):
        assert main(["refine", "--manifest", str(corpus / "manifest.json"), "--refiner", "tool {crop}",
                     "--out", str(tmp_path / "o")]) == 2

    def test_pseudo_pair(self, png, tmp_path):
        out = tmp_path / "pp"
        assert main(["pseudo-pair", str(png), "--out", str(out), "--per-image", "3", "--seed", "5",
                     "--strength", "0.3"]) == 0
        recs = [PairRecord.from_json(line) for line in (out / "pairs.jsonl").read_text().splitlines()]
        assert len(recs) == 3 and [r.degrade_spec["seed"] for r in recs] == [5, 6, 7]
        assert all(load_image(r.degraded_path).shape == (160, 160, 3) for r in recs)

    def test_pseudo_pair_deterministic(self, png, tmp_path):
        for run in ("a", "b"):
            assert main(["pseudo-pair", str(png), "--out", str(tmp_path / run), "--level", "0.5"]) == 0
        for name in ("t_000_degraded.png", "t_000_reference.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_pseudo_pair_external(self, png, tmp_path):
        out = tmp_path / "pp"
        assert main(["pseudo-pair", str(png), "--out", str(out), "--degrader", "cp {in} {out}",
                     "--level", "1.0"]) == 0
        assert main(["pseudo-pair", str(png), "--out", str(out), "--degrader", "false {in} {out}"]) == 2

    def test_validate_degrade(self, png, tmp_path, capsys):
        assert main(["validate-degrade", str(png), "--control", "--variants", "4"]) == 0
        doc = json.loads(capsys.readouterr().out)
        row = doc["images"][0]
        assert row["builtin"]["hi_lo_ratio"] > row["control"]["hi_lo_ratio"]

    def test_config_file_sections(self, corpus, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"min_matches": 100000, "matcher": {"kind": "affine"}}))
        out = tmp_path / "kept.json"
        assert main(["filter", "--manifest", str(corpus / "manifest.json"), "--out", str(out),
                     "--config", str(cfg)]) == 0
        assert len(load_manifest(out)) == 0
        assert main(["filter", "--manifest", str(corpus / "manifest.json"), "--out", str(out),
                     "--config", str(cfg), "--min-matches", "0"]) == 0
        assert len(load_manifest(out)) == 3


def test_relative_manifest_paths(corpus, tmp_path):
    m = load_manifest(corpus / "manifest.json")
    save_manifest(m.absolute(), tmp_path / "moved.json")
    assert load_manifest(tmp_path / "moved.json").missing_files() == []
