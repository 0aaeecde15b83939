import json

import numpy as np
import pytest
from scipy import stats

from secdet import pipeline as pl
from secdet.errors import ConfigError
from secdet.layers import graph_output_shape
from secdet.numeric import default_codec

CODEC = default_codec()


def natural_image(rng, size=64):
    """Synthetic gradient-plus-blob image with a clustered histogram."""
    yy, xx = np.mgrid[0:size, 0:size]
    img = 90.0 + 40.0 * (xx / size) + 15.0 * np.sin(yy / 6.0)
    cx, cy = rng.uniform(16, 48, 2)
    r = rng.uniform(6, 14)
    blob = ((xx - cx) ** 2 + (yy - cy) ** 2) < r * r
    img = np.where(blob, img + 60.0, img)
    img += rng.normal(0, 3.0, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def test_config_validation():
    cfg = pl.PipelineConfig()
    cfg.validate()
    with pytest.raises(ConfigError):
        pl.PipelineConfig(engine="spdz").validate()
    with pytest.raises(ConfigError):
        pl.PipelineConfig(transport="carrier-pigeon").validate()
    with pytest.raises(ConfigError):
        pl.PipelineConfig(eta=1.5).validate()
    with pytest.raises(ConfigError):
        pl.PipelineConfig(weights_path="/nonexistent/w.bin").validate()


def test_config_file_round_trip(tmp_path):
    cfg = pl.PipelineConfig(seed=7, eta=0.4)
    path = tmp_path / "cfg.json"
    pl.save_config(cfg, path)
    loaded = pl.load_config(path)
    assert loaded == cfg
    # flag overrides win over the file
    overridden = pl.load_config(path, eta=0.6)
    assert overridden.eta == 0.6


def test_split_image_round_trip_and_uniformity():
    rng = np.random.default_rng(0)
    img = natural_image(rng)
    s1, s2, (t1, t2) = pl.split_image(img, rng, CODEC)
    assert (pl.reconstruct_share_images(s1, s2) == img).all()
    # zero image: shares still sum to zero mod 256
    z1, z2, _ = pl.split_image(np.zeros((16, 16), dtype=np.uint8), rng, CODEC)
    assert ((z1.astype(int) + z2.astype(int)) % 256 == 0).all()
    # each exported share is uniform over [0, 255]
    for share in (s1, s2):
        counts = np.bincount(share.reshape(-1), minlength=256)
        assert stats.chisquare(counts).pvalue > 0.01
    # the field sharing reconstructs the normalized pixels
    rec = CODEC.decode(CODEC.ring.add(t1, t2))
    assert np.abs(rec - img[None] / 255.0).max() <= 2.0**-CODEC.f


def test_split_image_rejects_non_uint8():
    rng = np.random.default_rng(1)
    with pytest.raises(ConfigError):
        pl.split_image(np.zeros((8, 8), dtype=np.float64), rng, CODEC)


def test_pgm_and_png_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    img = natural_image(rng)
    pgm = tmp_path / "img.pgm"
    pl.save_pgm(img, pgm)
    assert (pl.load_image(pgm) == img).all()
    from PIL import Image

    png = tmp_path / "img.png"
    Image.fromarray(img).save(png)
    assert (pl.load_image(png) == img).all()


def test_desk_network_shapes():
    cfg = pl.PipelineConfig()
    rng = np.random.default_rng(3)
    backbone, (hc, hb) = pl.build_desk_network(rng, cfg)
    assert graph_output_shape(backbone, (1, 64, 64)) == (4, 8, 8)
    assert hc.in_channels == 4
    assert hc.out_channels == 1 + cfg.num_classes


def test_weights_file_cycle(tmp_path):
    cfg = pl.PipelineConfig()
    path = tmp_path / "w.bin"
    pl.make_weights(5, cfg, path)
    backbone, head = pl.load_weights(path, cfg.codec())
    assert graph_output_shape(backbone, (1, 64, 64)) == (4, 8, 8)
    # same seed -> byte-identical weights
    path2 = tmp_path / "w2.bin"
    pl.make_weights(5, cfg, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_oracle_infer_deterministic():
    cfg = pl.PipelineConfig()
    rng = np.random.default_rng(4)
    backbone, head = pl.build_desk_network(rng, cfg)
    img = natural_image(rng)
    d1, s1 = pl.oracle_infer(img, backbone, head, cfg)
    d2, s2 = pl.oracle_infer(img, backbone, head, cfg)
    assert [d.as_dict() for d in d1] == [d.as_dict() for d in d2]
    assert np.array_equal(s1["boxes"], s2["boxes"])
    for d in d1:
        assert 0.0 <= d.confidence <= 1.0
        x1, y1, x2, y2 = d.box
        assert 0.0 <= x1 <= pl.FRAME and 0.0 <= y2 <= pl.FRAME


def test_secure_infer_matches_oracle_smoke():
    cfg = pl.PipelineConfig(seed=11)
    rng = np.random.default_rng(11)
    backbone, head = pl.build_desk_network(rng, cfg)
    img = natural_image(rng)
    dets, transcript, report, extra = pl.secure_infer(img, backbone, head, cfg)
    assert report["feature_extraction"] <= 1e-3
    assert report["bbox_prediction"] <= 1e-3
    assert report["classification"] <= 1e-3
    assert report["kept_set_equal"]
    transcript.check_conservation()
    # oracle and secure agree on the class argmax of every detection
    oracle_dets, _ = pl.oracle_infer(img, backbone, head, cfg)
    assert [d.class_label for d in dets] == [d.class_label for d in oracle_dets]


def test_secure_infer_share_dump_uncorrelated():
    """A single party's share tensor carries no signal about the features."""
    cfg = pl.PipelineConfig(seed=12)
    rng = np.random.default_rng(12)
    backbone, head = pl.build_desk_network(rng, cfg)
    img = natural_image(rng)
    _, _, _, extra = pl.secure_infer(img, backbone, head, cfg, collect_share_dump=True)
    dump = extra["share_dump"].astype(np.float64).reshape(-1)
    feats = extra["oracle"]["features"].reshape(-1)
    paired = abs(np.corrcoef(dump, feats)[0, 1])
    null = []
    perm_rng = np.random.default_rng(0)
    for _ in range(200):
        null.append(abs(np.corrcoef(perm_rng.permutation(dump), feats)[0, 1]))
    assert paired <= np.quantile(null, 0.99) + 0.05


def test_grr3_engine_runs_and_agrees():
    cfg = pl.PipelineConfig(seed=13, engine="grr3")
    rng = np.random.default_rng(13)
    backbone, head = pl.build_desk_network(rng, cfg)
    img = natural_image(rng)
    dets, transcript, report, _ = pl.secure_infer(img, backbone, head, cfg)
    assert transcript is None  # simulated engine, no wire traffic
    assert report["feature_extraction"] <= 1e-3
    assert report["kept_set_equal"]


def test_bench_rows_shape(tmp_path):
    cfg = pl.PipelineConfig(seed=1)
    rows = pl.bench(cfg, sizes=[200, 400], protocols=("comp", "ds"), repeats=1)
    assert len(rows) == 4
    for r in rows:
        assert r["wall_ms"] > 0
        assert r["rounds"] >= 1
    ds_rows = [r for r in rows if r["protocol"] == "ds"]
    assert all(r["rounds"] == 1 for r in ds_rows)
    assert all(r["elements"] == 2 * r["n"] for r in ds_rows)
    csv = tmp_path / "bench.csv"
    pl.write_bench_csv(rows, csv)
    lines = csv.read_text().strip().splitlines()
    assert len(lines) == 5 and lines[0].startswith("protocol,")


def test_detections_jsonl(tmp_path):
    dets = [pl.DetectionResult(box=[1, 2, 3, 4], class_label=2, confidence=0.9)]
    path = tmp_path / "d.jsonl"
    pl.write_detections_jsonl(dets, path)
    row = json.loads(path.read_text().strip())
    assert row == {"box": [1, 2, 3, 4], "class_label": 2, "confidence": 0.9}
