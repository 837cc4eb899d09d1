import json
import sys

import numpy as np
import pytest

from fidelitykit.bench import (AllSamplesSkippedError, EvalConfig, EvalReport, Manifest, ManifestEntry,
                               ManifestError, RefinerSpec, emit_scatter, entries_from, export_subject_crops,
                               image_key, load_manifest, parse_manifest, quality_filter, read_scatter_csv,
                               run_eval, run_refine, save_manifest, stratified_subset)
from fidelitykit.cropblend import CropRegion
from fidelitykit.imgcore import Image, load_image, save_image
from fidelitykit.metrics import EmbeddingVector, SampleResult, aggregate, save_embedding
from fidelitykit.synthetic import build_corpus, similarity_matrix, smooth_scene, textured_image, warp_into

PY = sys.executable
IDENTITY = f"{PY} -m fidelitykit.refiners identity {{subject}} {{crop}} {{out}}"


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    m = build_corpus(d, n=4, seed=1)
    return d, m


@pytest.fixture(scope="module")
def refined_identity(corpus, tmp_path_factory):
    d, m = corpus
    return run_refine(m, RefinerSpec(IDENTITY), tmp_path_factory.mktemp("refined"))


def with_refined(m: Manifest, paths: dict) -> Manifest:
    return Manifest([ManifestEntry(e.sample_id, e.subject_path, e.generated_path, paths.get(e.sample_id),
                                   e.method_tag, e.backbone_tag) for e in m.entries], m.schema_version, m.base_dir)


class TestManifest:
    def test_empty(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"schema_version": "fk-manifest-v1", "entries": []}))
        assert len(load_manifest(p)) == 0

    def test_duplicate_named(self):
        e = {"sample_id": "dup", "subject_path": "a.png", "generated_path": "b.png"}
        with pytest.raises(ManifestError, match="dup"):
            entries_from([e, e])

    def test_roundtrip(self, tmp_path):
        m = entries_from([{"sample_id": "s1", "subject_path": "a.png", "generated_path": "b.png",
                           "refined_path": "c.png", "method_tag": "x", "backbone_tag": "y"},
                          {"sample_id": "s2", "subject_path": "a.png", "generated_path": "d.png"}])
        save_manifest(m, tmp_path / "m.json")
        assert load_manifest(tmp_path / "m.json") == m

    @pytest.mark.parametrize("doc, where", [
        ({"entries": [{"sample_id": "s", "subject_path": "a"}]}, "entries[0].generated_path"),
        ({"entries": [{"sample_id": "s", "subject_path": "a", "generated_path": "b", "prompt": "x"}]}, "prompt"),
        ({"entries": {}}, "entries"),
        ({"schema_version": "v0", "entries": []}, "schema_version"),
        ({"entries": [{"sample_id": 3, "subject_path": "a", "generated_path": "b"}]}, "entries[0].sample_id"),
    ])
    def test_field_diagnostics(self, doc, where):
        with pytest.raises(ManifestError, match=where.replace("[", r"\[").replace("]", r"\]")):
            parse_manifest(doc)

    def test_bad_json_line(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{\n "entries": [\n ,]\n}')
        with pytest.raises(ManifestError, match="line 3"):
            load_manifest(p)

    def test_missing_files_listed(self, tmp_path):
        save_image(Image(np.zeros((4, 4, 3))), tmp_path / "a.png")
        m = entries_from([{"sample_id": "s1", "subject_path": "a.png", "generated_path": "nope.png",
                           "refined_path": "gone.png"}], str(tmp_path))
        missing = m.missing_files()
        assert len(missing) == 2 and any("nope.png" in x for x in missing)


class TestQualityFilter:
    def test_zero_is_identity(self, corpus):
        _, m = corpus
        kept, logs = quality_filter(m, 0)
        assert kept == m and all(r["kept"] for r in logs)

    def test_constant_removed(self, corpus, tmp_path):
        d, m = corpus
        save_image(Image(np.full((384, 384, 3), 0.5)), tmp_path / "flat.png")
        m2 = entries_from([{"sample_id": "flat", "subject_path": str(d / "s000_subject.png"),
                            "generated_path": str(tmp_path / "flat.png")}])
        for k in (1, 10):
            kept, logs = quality_filter(m2, k)
            assert len(kept) == 0 and logs[0]["count"] == 0

    def test_planted_half(self, corpus, tmp_path):
        d, m = corpus
        extra = []
        for i, e in enumerate(m.entries):
            save_image(smooth_scene(384, 384, seed=100 + i), tmp_path / f"empty{i}.png")
            extra.append({"sample_id": f"e{i}", "subject_path": str(d / e.subject_path),
                          "generated_path": str(tmp_path / f"empty{i}.png")})
        mixed = entries_from([x.to_dict() for x in m.absolute().entries] + extra)
        kept, logs = quality_filter(mixed, 10)
        assert {e.sample_id for e in kept.entries} == {e.sample_id for e in m.entries}
        assert len(logs) == 8

    def test_unreadable_logged(self, corpus):
        d, _ = corpus
        m = entries_from([{"sample_id": "x", "subject_path": str(d / "s000_subject.png"),
                           "generated_path": str(d / "missing.png")}])
        kept, logs = quality_filter(m, 5)
        assert len(kept) == 0 and "error" in logs[0]


class TestRunEval:
    def test_self_comparison(self, corpus):
        _, m = corpus
        rep = run_eval(with_refined(m, {e.sample_id: e.generated_path for e in m.entries}))
        assert all(s.aki == 0 for s in rep.samples)
        assert rep.overall.k_gain == 0.0 and len(rep.samples) == 4

    def test_planted_improvement(self, corpus, tmp_path):
        d, m = corpus
        truth = json.loads((d / "truth.json").read_text())
        paths = {}
        for e in m.entries[:2]:
            gen = load_image(d / e.generated_path)
            pasted, _ = warp_into(gen, load_image(d / e.subject_path), np.array(truth[e.sample_id]))
            save_image(pasted, tmp_path / f"{e.sample_id}.png")
            paths[e.sample_id] = str(tmp_path / f"{e.sample_id}.png")
        two = Manifest([x for x in with_refined(m, paths).entries if x.refined_path], base_dir=str(d))
        rep = run_eval(two)
        assert all(s.aki > 0 for s in rep.samples)
        assert rep.overall.k_gain == 1.0

    def test_unreadable_refined_skipped(self, corpus, tmp_path):
        d, m = corpus
        (tmp_path / "bad.png").write_bytes(b"not a png")
        paths = {e.sample_id: e.generated_path for e in m.entries}
        paths["s002"] = str(tmp_path / "bad.png")
        rep = run_eval(with_refined(m, paths))
        assert [s.sample_id for s in rep.skips] == ["s002"]
        assert rep.overall.n_samples == 3
        assert len(rep.samples) + len(rep.skips) == len(m)

    def test_missing_refined_path_skipped(self, corpus):
        _, m = corpus
        rep = run_eval(with_refined(m, {"s000": m.entries[0].generated_path}))
        assert len(rep.skips) == 3 and rep.skips[0].reason == "no refined_path"

    def test_all_skipped(self, corpus):
        _, m = corpus
        with pytest.raises(AllSamplesSkippedError):
            run_eval(m)

    def test_deterministic_across_workers(self, corpus):
        _, m = corpus
        mm = with_refined(m, {e.sample_id: e.generated_path for e in m.entries})
        a = run_eval(mm, workers=1).to_json(with_timestamps=False)
        b = run_eval(mm, workers=4).to_json(with_timestamps=False)
        assert a == b and "timestamps" not in json.loads(a)

    def test_report_roundtrip(self, corpus, tmp_path):
        _, m = corpus
        rep = run_eval(with_refined(m, {e.sample_id: e.generated_path for e in m.entries}))
        rep.save(tmp_path / "r.json")
        back = EvalReport.load(tmp_path / "r.json")
        assert back.to_json() == rep.to_json()
        doc = json.loads(rep.to_json())
        assert doc["schema_version"] == "fk-report-v1" and doc["config"]["tau"] == 0

    def test_on_crop_mode(self, corpus):
        _, m = corpus
        mm = with_refined(m, {e.sample_id: e.generated_path for e in m.entries})
        rep = run_eval(mm, EvalConfig(on_crop=True))
        assert rep.overall.mean_aki == 0.0 and rep.config["on_crop"]

    def test_embeddings_join(self, corpus, tmp_path):
        _, m = corpus
        mm = with_refined(m, {e.sample_id: e.generated_path for e in m.entries})
        emb = {image_key("s001", "subject"): EmbeddingVector("a", np.array([1.0, 0.0])),
               image_key("s001", "refined"): EmbeddingVector("b", np.array([1.0, 1.0]))}
        rep = run_eval(mm, embeddings={"clip_i": emb})
        by = {s.sample_id: s for s in rep.samples}
        assert by["s001"].clip_i == pytest.approx(2 ** -0.5)
        assert by["s000"].clip_i is None and by["s001"].dino is None
        assert rep.overall.mean_clip_i == pytest.approx(2 ** -0.5)


class TestRunRefine:
    def test_identity_refiner(self, corpus, refined_identity):
        d, m = corpus
        res = refined_identity
        assert not res.skips and len(res.regions) == 4
        for e in res.manifest.entries:
            gen = load_image(d / f"{e.sample_id}_generated.png").to_uint8().astype(int)
            out = load_image(e.refined_path).to_uint8().astype(int)
            r = res.regions[e.sample_id]
            inside = np.zeros(gen.shape[:2], bool)
            inside[r.slices] = True
            assert np.array_equal(out[~inside], gen[~inside])
            assert np.abs(out[inside] - gen[inside]).max() <= 1

    def test_identity_aki_small(self, refined_identity):
        rep = run_eval(refined_identity.manifest)
        assert abs(rep.overall.mean_aki) <= 2

    def test_manifest_saved_elsewhere_resolves(self, refined_identity, tmp_path):
        save_manifest(refined_identity.manifest, tmp_path / "m.json")
        assert load_manifest(tmp_path / "m.json").missing_files() == []

    def test_wrong_size_refiner(self, corpus, tmp_path):
        _, m = corpus
        script = tmp_path / "bad.py"
        script.write_text("import sys\nfrom PIL import Image\nImage.new('RGB', (7, 5)).save(sys.argv[3])\n")
        res = run_refine(m, RefinerSpec(f"{PY} {script} {{subject}} {{crop}} {{out}}"), tmp_path / "o")
        assert len(res.skips) == 4 and all(s.reason.startswith("dim mismatch") for s in res.skips)
        assert all(e.refined_path is None for e in res.manifest.entries)

    def test_failing_refiner_diagnostics(self, corpus, tmp_path):
        _, m = corpus
        cmd = f"{PY} -c \"import sys; sys.stderr.write('kaput'); sys.exit(4)\" {{subject}} {{crop}} {{out}}"
        res = run_refine(Manifest(m.entries[:1], base_dir=m.base_dir), RefinerSpec(cmd), tmp_path / "o")
        assert "kaput" in res.skips[0].reason and "exited 4" in res.skips[0].reason

    def test_timeout(self, corpus, tmp_path):
        _, m = corpus
        cmd = f"{PY} -c \"import time; time.sleep(5)\" {{subject}} {{crop}} {{out}}"
        res = run_refine(Manifest(m.entries[:1], base_dir=m.base_dir), RefinerSpec(cmd, timeout=0.5), tmp_path / "o")
        assert "timed out" in res.skips[0].reason

    def test_template_validation(self):
        with pytest.raises(ValueError, match="crop"):
            RefinerSpec("tool {subject} {out}")

    def test_unknown_mode(self, corpus, tmp_path):
        with pytest.raises(ValueError):
            run_refine(corpus[1], RefinerSpec(IDENTITY), tmp_path, mode="fancy")


class TestScatter:
    def report(self, pairs):
        samples = [SampleResult(f"s{i + 1}", b, r) for i, (b, r) in enumerate(pairs)]
        return EvalReport({"tau": 0}, samples, [], [], aggregate(samples))

    def test_csv_row(self, tmp_path):
        emit_scatter(self.report([(80, 120)]), tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text().splitlines() == ["sample_id,n_base,n_refined,aki", "s1,80,120,40"]

    def test_csv_roundtrip(self, tmp_path):
        pairs = [(3, 9), (10, 2), (5, 5), (0, 40)]
        emit_scatter(self.report(pairs), tmp_path / "s.csv")
        assert [row[3] for row in read_scatter_csv(tmp_path / "s.csv")] == [r - b for b, r in pairs]

    def test_svg_on_identity_line(self, tmp_path):
        emit_scatter(self.report([(4, 4), (10, 10), (25, 25)]), tmp_path / "s.svg")
        svg = (tmp_path / "s.svg").read_text()
        assert 'class="identity"' in svg and 'stroke-dasharray' in svg and 'class="gain-region"' in svg
        import re
        for cx, cy in re.findall(r'class="sample" cx="([\d.]+)" cy="([\d.]+)"', svg):
            assert float(cx) + float(cy) == pytest.approx(400)

    def test_errors(self, tmp_path):
        with pytest.raises(ValueError):
            emit_scatter(self.report([(1, 2)]), tmp_path / "s.png")
        with pytest.raises(ValueError):
            emit_scatter(EvalReport({}, [], [], [], aggregate([SampleResult("a", 1, 1)])), tmp_path / "s.csv")
        with pytest.raises(OSError):
            emit_scatter(self.report([(1, 2)]), tmp_path / "no" / "dir" / "s.csv")


class TestCrops:
    @pytest.mark.parametrize("seed, size", [(21, 160), (22, 192), (23, 128), (24, 256), (25, 160)])
    def test_exact_copy_coverage(self, tmp_path, seed, size):
        subject = textured_image(size, seed=seed, n_shapes=30)
        c = (size - 1) / 2
        gen, mask = warp_into(smooth_scene(448, 384, seed=seed), subject,
                              similarity_matrix(1.0, 0.0, 230.0, 190.0, c, c))
        save_image(subject, tmp_path / "sub.png")
        save_image(gen, tmp_path / "gen.png")
        man = entries_from([{"sample_id": "p", "subject_path": "sub.png", "generated_path": "gen.png"}],
                           str(tmp_path))
        doc = export_subject_crops(man, tmp_path / "crops")
        r = CropRegion.from_dict(doc["entries"][0]["region"])
        assert mask[r.slices].sum() / mask.sum() >= 0.9
        ids = [im["image_id"] for im in doc["entries"][0]["images"]]
        assert ids == ["p:subject", "p:generated"]
        assert json.loads((tmp_path / "crops" / "crops.json").read_text()) == doc

    def test_constant_skipped(self, corpus, tmp_path):
        d, _ = corpus
        save_image(Image(np.full((200, 200, 3), 0.3)), tmp_path / "flat.png")
        man = entries_from([{"sample_id": "f", "subject_path": str(d / "s000_subject.png"),
                             "generated_path": str(tmp_path / "flat.png")}])
        doc = export_subject_crops(man, tmp_path / "c")
        assert doc["entries"] == [] and "subject not localized" in doc["skips"][0]["reason"]

    def test_deterministic_with_refined(self, refined_identity, tmp_path):
        a = export_subject_crops(refined_identity.manifest, tmp_path / "a")
        b = export_subject_crops(refined_identity.manifest, tmp_path / "b")
        assert [e["region"] for e in a["entries"]] == [e["region"] for e in b["entries"]]
        assert all(len(e["images"]) == 3 for e in a["entries"])


class TestSubset:
    def manifest(self, n):
        return entries_from([{"sample_id": f"s{i:03d}", "subject_path": "a", "generated_path": "b"}
                             for i in range(n)])

    def test_proportional_per_decile(self):
        m = self.manifest(100)
        counts = {f"s{i:03d}": i for i in range(100)}
        sub = stratified_subset(m, counts, 30, seed=3)
        assert len(sub) == 30
        deciles = np.bincount([counts[e.sample_id] // 10 for e in sub.entries], minlength=10)
        assert deciles.tolist() == [3] * 10

    def test_seeded(self):
        m = self.manifest(57)
        counts = {f"s{i:03d}": (i * 7) % 23 for i in range(57)}
        a = stratified_subset(m, counts, 20, seed=1)
        assert a == stratified_subset(m, counts, 20, seed=1)
        assert len(a) == 20
        assert a != stratified_subset(m, counts, 20, seed=2)

    def test_larger_than_pool(self):
        m = self.manifest(5)
        assert len(stratified_subset(m, {f"s{i:03d}": i for i in range(5)}, 10)) == 5


def test_save_embedding_dir_join(tmp_path):
    save_embedding(EmbeddingVector("s1:subject", np.ones(3)), tmp_path / "a.json")
    from fidelitykit.metrics import load_embedding_dir
    assert set(load_embedding_dir(tmp_path)) == {"s1:subject"}
