import json

import numpy as np
import pytest

from oracles import flood_fill_components
from skelfont import data, raster, skeleton
from skelfont.errors import ConfigError, EmptyStyle, ExhaustedSplit


class TestSynthSpec:
    def test_bad_canvas(self):
        with pytest.raises(ConfigError):
            data.SynthSpec(glyph_count=5, canvas=30)

    def test_bad_count(self):
        with pytest.raises(ConfigError):
            data.SynthSpec(glyph_count=0)


class TestSynthCorpus:
    def test_deterministic_bytes(self, tmp_path):
        spec = data.SynthSpec(glyph_count=3, canvas=32, seed=5)
        m1 = data.synth_corpus(spec, tmp_path / "a")
        m2 = data.synth_corpus(spec, tmp_path / "b")
        files1 = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
        files2 = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
        assert files1 == files2 and len(files1) == 12  # 2 styles x (image+skeleton) x 3
        for rel in files1:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        assert m1.read_text() == m2.read_text()

    def test_canvas_size_respected(self, corpus20):
        img = raster.load_image(corpus20 / "source" / "g0000.png")
        assert (img.height, img.width) == (64, 64)

    def test_component_counts_match_across_styles(self, corpus20):
        for i in range(0, 12, 3):
            cid = f"g{i:04d}"
            counts = []
            for style in ("source", "target"):
                img = raster.load_image(corpus20 / style / f"{cid}.png")
                mask = (img.pixels < 0.5).astype(np.uint8)
                counts.append(flood_fill_components(mask))
            assert counts[0] == counts[1], cid

    def test_skeleton_cache_matches_fresh_extraction(self, corpus20):
        cid = "g0003.png"
        img = raster.load_image(corpus20 / "source" / cid)
        cached = raster.load_image(corpus20 / data.SKELETON_DIR / "source" / cid)
        fresh = skeleton.extract_skeleton(img, skeleton.ThinningConfig())
        assert np.abs(cached.pixels - fresh.pixels).max() <= 1 / 255


class TestBuildManifest:
    def make_tree(self, root, chars, styles=("source", "target")):
        rng = np.random.default_rng(0)
        for style in styles:
            for c in chars:
                arr = np.ones((16, 16))
                arr[4:12, 4:12] = rng.random((8, 8)) * 0.2
                raster.save_image(raster.RasterImage(arr), root / style / f"{c}.png")

    def test_ten_chars_811(self, tmp_path):
        chars = [f"c{i}" for i in range(10)]
        self.make_tree(tmp_path, chars)
        result = data.build_manifest(tmp_path, (8, 1, 1), seed=3)
        entries = data.load_manifest(result.path)
        by_split = {}
        for e in entries:
            if e.style == "source":
                by_split.setdefault(e.split, set()).add(e.char_id)
        assert len(by_split["train"]) == 8
        assert len(by_split["dev"]) == 1
        assert len(by_split["test"]) == 1

    def test_deterministic_given_seed(self, tmp_path):
        chars = [f"c{i}" for i in range(7)]
        self.make_tree(tmp_path, chars)
        r1 = data.build_manifest(tmp_path, seed=9)
        text1 = r1.path.read_text()
        r2 = data.build_manifest(tmp_path, seed=9)
        assert text1 == r2.path.read_text()

    def test_no_char_in_two_splits(self, tmp_path):
        chars = [f"c{i}" for i in range(12)]
        self.make_tree(tmp_path, chars)
        entries = data.load_manifest(data.build_manifest(tmp_path, seed=1).path)
        split_of = {}
        for e in entries:
            assert split_of.setdefault(e.char_id, e.split) == e.split

    def test_source_only_char_warned(self, tmp_path):
        chars = [f"c{i}" for i in range(4)]
        self.make_tree(tmp_path, chars)
        raster.save_image(raster.RasterImage(np.ones((16, 16))), tmp_path / "source" / "lonely.png")
        result = data.build_manifest(tmp_path, seed=0)
        assert any("lonely" in w for w in result.warnings)
        entries = data.load_manifest(result.path)
        assert not data.paired_entries(entries, "train") or all(
            s.char_id != "lonely" for s, _ in data.paired_entries(entries, "train")
        )

    def test_empty_style_dir(self, tmp_path):
        (tmp_path / "source").mkdir(parents=True)
        with pytest.raises(EmptyStyle):
            data.build_manifest(tmp_path)

    def test_manifest_is_json_array(self, corpus20):
        rows = json.loads((corpus20 / "manifest.json").read_text())
        assert isinstance(rows, list)
        assert set(rows[0]) == {"char_id", "style", "path", "split"}


class TestNextBatch:
    def test_same_seed_step_same_batch(self, corpus20, corpus20_entries):
        b1 = data.next_batch(corpus20, corpus20_entries, "train", 4, 2)
        b2 = data.next_batch(corpus20, corpus20_entries, "train", 4, 2)
        assert b1.char_id == b2.char_id and b1.flipped == b2.flipped
        assert (b1.x_img == b2.x_img).all()

    def test_flip_applied_jointly(self, corpus20, corpus20_entries):
        flipped = None
        for step in range(data.epoch_length(corpus20_entries, "train")):
            b = data.next_batch(corpus20, corpus20_entries, "train", 7, step)
            if b.flipped:
                flipped = b
                break
        assert flipped is not None, "no flip in a whole epoch is vanishingly unlikely"
        entries = {(e.style): e for e in corpus20_entries if e.char_id == flipped.char_id}
        raw = data._load_gray(corpus20 / entries["source"].path)
        raw_skel = data._load_gray(corpus20 / data.SKELETON_DIR / entries["source"].path)
        assert (flipped.x_img == raw[:, ::-1]).all()
        assert (flipped.x_skel == raw_skel[:, ::-1]).all()

    def test_eval_splits_never_flip(self, corpus20, corpus20_entries):
        for split in ("dev", "test"):
            n = data.epoch_length(corpus20_entries, split)
            for seed in (0, 1, 2):
                for step in range(n):
                    assert not data.next_batch(corpus20, corpus20_entries, split, seed, step).flipped

    def test_exhausted_split_signals_epoch_boundary(self, corpus20, corpus20_entries):
        n = data.epoch_length(corpus20_entries, "train")
        with pytest.raises(ExhaustedSplit):
            data.next_batch(corpus20, corpus20_entries, "train", 0, n)

    def test_epoch_covers_every_pair_once(self, corpus20, corpus20_entries):
        n = data.epoch_length(corpus20_entries, "train")
        seen = [
            data.next_batch(corpus20, corpus20_entries, "train", 3, s).char_id
            for s in range(n)
        ]
        assert len(set(seen)) == n

    def test_skeleton_matches_cache(self, corpus20, corpus20_entries):
        b = data.next_batch(corpus20, corpus20_entries, "train", 2, 0)
        entry = next(
            e for e in corpus20_entries if e.char_id == b.char_id and e.style == "source"
        )
        cached = data._load_gray(corpus20 / data.SKELETON_DIR / entry.path)
        got = b.x_skel if not b.flipped else b.x_skel[:, ::-1]
        assert (got == cached).all()

    def test_unpaired_mode_flags_mismatched_chars(self, corpus20, corpus20_entries):
        unpaired_seen = False
        for step in range(data.epoch_length(corpus20_entries, "train")):
            b = data.next_batch(corpus20, corpus20_entries, "train", 5, step, allow_unpaired=True)
            if not b.paired:
                unpaired_seen = True
        assert unpaired_seen

    def test_empty_pairs_config_error(self, corpus20, corpus20_entries):
        only_source = [e for e in corpus20_entries if e.style == "source"]
        with pytest.raises(ConfigError):
            data.next_batch(corpus20, only_source, "train", 0, 0)
