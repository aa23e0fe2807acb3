import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fashionsap.data_io import (
    COLOR_RGB,
    SEED_ENV_VAR,
    FashionRecord,
    SynthSpec,
    generate_synthetic,
    load_corpus,
    load_image,
    parse_config,
    record_to_json,
    resize_nearest,
    save_fsapimg,
    save_ppm,
    write_corpus,
)
from fashionsap.errors import (
    CorpusParseError,
    FormatError,
    InvalidConfigError,
    SchemaError,
)
from fashionsap.taxonomy import FashionSymbol, map_category
from fashionsap.textpipe import BinaryAttribute, EnumAttribute


def _record(i=0, **kw):
    base = dict(
        item_id=f"it{i}",
        caption="a red shirt",
        category="shirt",
        subcategory="shirt",
        enum_attrs=[EnumAttribute("color", "red")],
        binary_attrs=[BinaryAttribute("red", True)],
        image_ref=f"img{i}.fsapimg",
        split="train",
    )
    base.update(kw)
    return FashionRecord(**base)


# -- corpus ---------------------------------------------------------------------


def test_load_corpus_well_formed(tmp_path):
    for i in range(3):
        save_fsapimg(tmp_path / f"img{i}.fsapimg", np.zeros((4, 4, 3)))
    write_corpus([_record(i) for i in range(3)], tmp_path / "c.jsonl")
    records = load_corpus(tmp_path / "c.jsonl")
    assert len(records) == 3
    assert records[1].item_id == "it1"


def test_load_corpus_duplicate_id_cites_line(tmp_path):
    save_fsapimg(tmp_path / "img0.fsapimg", np.zeros((4, 4, 3)))
    rows = [_record(0), _record(0)]
    write_corpus(rows, tmp_path / "c.jsonl")
    with pytest.raises(SchemaError, match="line 2"):
        load_corpus(tmp_path / "c.jsonl")


def test_load_corpus_missing_caption_is_schema_error(tmp_path):
    obj = json.loads(record_to_json(_record(0)))
    del obj["caption"]
    (tmp_path / "c.jsonl").write_text(json.dumps(obj) + "\n")
    with pytest.raises(SchemaError, match="caption"):
        load_corpus(tmp_path / "c.jsonl", check_images=False)


def test_load_corpus_malformed_line_number(tmp_path):
    good = record_to_json(_record(0))
    (tmp_path / "c.jsonl").write_text(good + "\n{broken\n")
    with pytest.raises(CorpusParseError, match="line 2"):
        load_corpus(tmp_path / "c.jsonl", check_images=False)


def test_load_corpus_missing_image_checked(tmp_path):
    write_corpus([_record(0)], tmp_path / "c.jsonl")
    with pytest.raises(SchemaError, match="image_ref"):
        load_corpus(tmp_path / "c.jsonl")


def test_corpus_round_trip_bytes(tmp_path):
    records = [_record(i, split=s) for i, s in enumerate(("train", "val", "test"))]
    path = tmp_path / "c.jsonl"
    write_corpus(records, path)
    blob = path.read_bytes()
    again = load_corpus(path, check_images=False)
    path2 = tmp_path / "c2.jsonl"
    write_corpus(again, path2)
    assert path2.read_bytes() == blob


# -- images ---------------------------------------------------------------------


def test_fsapimg_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((8, 8, 3)).astype(np.float32)
    save_fsapimg(tmp_path / "x.fsapimg", img)
    back = load_image(tmp_path / "x.fsapimg", 8)
    assert np.array_equal(back, img)


def test_ppm_all_white_scales_to_one(tmp_path):
    save_ppm(tmp_path / "w.ppm", np.ones((2, 2, 3)))
    img = load_image(tmp_path / "w.ppm", 2)
    assert np.allclose(img, 1.0)


def test_ppm_round_trip_quantized(tmp_path):
    rng = np.random.default_rng(1)
    img = (rng.integers(0, 256, size=(4, 4, 3)) / 255.0).astype(np.float32)
    save_ppm(tmp_path / "x.ppm", img)
    back = load_image(tmp_path / "x.ppm", 4)
    assert np.allclose(back, img, atol=1 / 255.0 + 1e-7)


def test_load_image_resizes_nearest(tmp_path):
    img = np.zeros((2, 2, 3), dtype=np.float32)
    img[0, 0] = 1.0
    save_fsapimg(tmp_path / "x.fsapimg", img)
    big = load_image(tmp_path / "x.fsapimg", 4)
    assert big.shape == (4, 4, 3)
    assert np.allclose(big[:2, :2], 1.0)
    assert np.allclose(big[2:, 2:], 0.0)


def test_resize_nearest_identity():
    img = np.random.default_rng(2).random((8, 8, 3))
    assert resize_nearest(img, 8) is img


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "x.fsapimg").write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(FormatError):
        load_image(tmp_path / "x.fsapimg", 4)
    (tmp_path / "y.ppm").write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 12)
    with pytest.raises(FormatError):
        load_image(tmp_path / "y.ppm", 2)
    with pytest.raises(FormatError):
        load_image(tmp_path / "z.png", 4)


@settings(max_examples=30)
@given(st.integers(min_value=1, max_value=110))
def test_truncation_fuzz_never_crashes(cut):
    import tempfile, pathlib

    with tempfile.TemporaryDirectory() as d:
        d = pathlib.Path(d)
        img = np.random.default_rng(3).random((3, 3, 3)).astype(np.float32)
        save_fsapimg(d / "x.fsapimg", img)
        blob = (d / "x.fsapimg").read_bytes()
        if cut >= len(blob):
            return
        (d / "cut.fsapimg").write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_image(d / "cut.fsapimg", 3)
        save_ppm(d / "x.ppm", img)
        pblob = (d / "x.ppm").read_bytes()
        if cut < len(pblob):
            (d / "cut.ppm").write_bytes(pblob[:cut])
            with pytest.raises(FormatError):
                load_image(d / "cut.ppm", 3)


# -- synthetic corpus -------------------------------------------------------------


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic(SynthSpec(n_items=15, seed=4), a)
    generate_synthetic(SynthSpec(n_items=15, seed=4), b)
    assert (a / "corpus.jsonl").read_bytes() == (b / "corpus.jsonl").read_bytes()
    assert (a / "tmir_triples.jsonl").read_bytes() == (b / "tmir_triples.jsonl").read_bytes()
    for img in sorted((a / "images").iterdir()):
        assert img.read_bytes() == (b / "images" / img.name).read_bytes()


def test_synth_rejects_tiny_spec(tmp_path):
    with pytest.raises(InvalidConfigError):
        generate_synthetic(SynthSpec(n_items=1), tmp_path)


def test_synth_red_captions_have_red_regions(synth_dir, synth_records):
    from fashionsap.data_io import _REGIONS, GARMENTS

    reds = [r for r in synth_records if "red" in r.caption]
    assert reds
    for rec in reds:
        img = load_image(synth_dir / rec.image_ref, 32)
        symbol = map_category(rec.category)
        gi = GARMENTS.index(rec.category)
        overwritten = {(gi % 4, (2 * gi + 1) % 4), (3, 0)}  # signature + length marker
        cells = [rc for rc in _REGIONS[symbol] if rc not in overwritten]
        assert cells
        for r, c in cells:
            patch = img[r * 8 : (r + 1) * 8, c * 8 : (c + 1) * 8]
            assert patch[..., 0].mean() > patch[..., 1].mean() + 0.3
            assert patch[..., 0].mean() > patch[..., 2].mean() + 0.3


def test_synth_categories_all_map_without_fallback(synth_records):
    for rec in synth_records:
        assert map_category(rec.category) != FashionSymbol.OTHERS


def test_synth_attributes_consistent(synth_records):
    for rec in synth_records:
        attrs = {a.name: a.value for a in rec.enum_attrs}
        assert set(attrs) == {"color", "length", "season"}
        assert attrs["color"] in rec.caption
        assert attrs["length"] in rec.caption
        assert attrs["season"] in rec.caption
        present = {a.label for a in rec.binary_attrs if a.present}
        absent = {a.label for a in rec.binary_attrs if not a.present}
        assert attrs["color"] in present
        assert attrs["color"] not in absent


def test_synth_tmir_triples_valid(synth_dir, synth_records):
    by_id = {r.item_id: r for r in synth_records}
    lines = (synth_dir / "tmir_triples.jsonl").read_text().strip().splitlines()
    assert lines
    for line in lines:
        t = json.loads(line)
        assert t["candidate"] != t["target"]
        cand, tgt = by_id[t["candidate"]], by_id[t["target"]]
        assert cand.subcategory == tgt.subcategory
        new_color = t["text"].split()[-1]
        assert dict((a.name, a.value) for a in tgt.enum_attrs)["color"] == new_color


def test_synth_linear_probe_on_mean_patch_color(synth_dir, synth_records):
    # planted signal: mean patch colors linearly separate the color attribute
    colors = sorted(COLOR_RGB)
    feats, labels = [], []
    for rec in synth_records:
        img = load_image(synth_dir / rec.image_ref, 32)
        feats.append(img.reshape(4, 8, 4, 8, 3).mean(axis=(1, 3)).reshape(-1))
        labels.append(colors.index({a.name: a.value for a in rec.enum_attrs}["color"]))
    x = np.asarray(feats)
    x = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    y = np.eye(len(colors))[labels]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    acc = float((np.argmax(x @ w, axis=1) == labels).mean())
    assert acc >= 0.95


# -- config -----------------------------------------------------------------------


def test_parse_config_empty_object_gives_desk_defaults(tmp_path):
    (tmp_path / "c.json").write_text("{}")
    mc, tc = parse_config(tmp_path / "c.json")
    assert mc.d == 32 and mc.image_size == 32 and mc.queue_size == 64
    assert tc.batch_size == 8


def test_parse_config_rejects_bad_tau(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"tau_init": -1}))
    with pytest.raises(InvalidConfigError):
        parse_config(tmp_path / "c.json")


def test_parse_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"d": 32, "nonsense_key": 1}))
    with pytest.raises(InvalidConfigError, match="nonsense_key"):
        parse_config(tmp_path / "c.json")


def test_parse_config_mixed_fields(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"d": 16, "heads": 2, "lr": 0.01, "steps": 5}))
    mc, tc = parse_config(tmp_path / "c.json")
    assert mc.d == 16 and tc.lr == 0.01 and tc.steps == 5


def test_env_seed_overrides_config(tmp_path, monkeypatch):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3}))
    monkeypatch.setenv(SEED_ENV_VAR, "99")
    _, tc = parse_config(tmp_path / "c.json")
    assert tc.seed == 99
    monkeypatch.setenv(SEED_ENV_VAR, "zzz")
    with pytest.raises(InvalidConfigError):
        parse_config(tmp_path / "c.json")


def test_full_scale_presets_validate():
    from fashionsap.model.config import full_scale_model_config, full_scale_train_config

    mc = full_scale_model_config().validate()
    tc = full_scale_train_config().validate()
    assert mc.queue_size == 65535 and tc.batch_size == 16 and tc.lr == 6e-5
    assert mc.image_size == 256 and mc.text_layers == 6 and mc.image_layers == 12
