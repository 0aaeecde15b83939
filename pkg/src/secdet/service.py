"""FastAPI service wrapping the pipeline.

Every endpoint body is a pydantic model; handlers delegate to plain
functions so the CLI can invoke the same service layer in-process.  Images
arrive as a filesystem path or base64-encoded bytes; artifacts (share
images, detections, transcripts, metrics) are written under the requested
output directory and echoed in the response.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field
from scipy import stats

from . import dealer as dealer_mod
from . import pipeline as pl
from .errors import SecdetError
from .transport import account

app = FastAPI(title="secdet", description="two-party secure detection harness")


class ConfigOverrides(BaseModel):
    modulus: int | None = None
    frac_bits: int | None = None
    int_bits: int | None = None
    engine: str | None = None
    transport: str | None = None
    seed: int | None = None
    eta: float | None = None
    num_classes: int | None = None
    anchor_count: int | None = None
    anchor_iters: int | None = None
    weights_path: str | None = None


class ImageSource(BaseModel):
    path: str | None = None
    data_b64: str | None = None

    def load(self) -> np.ndarray:
        if self.path:
            return pl.load_image(self.path)
        if self.data_b64:
            from PIL import Image

            raw = base64.b64decode(self.data_b64)
            img = Image.open(io.BytesIO(raw))
            if img.mode not in ("L", "RGB"):
                img = img.convert("L")
            arr = np.asarray(img, dtype=np.uint8)
            return arr.transpose(2, 0, 1) if arr.ndim == 3 else arr
        raise HTTPException(status_code=422, detail="image path or data_b64 required")


def _config(path: str | None, overrides: ConfigOverrides | None) -> pl.PipelineConfig:
    kwargs = overrides.model_dump(exclude_none=True) if overrides else {}
    try:
        return pl.load_config(path, **kwargs)
    except SecdetError as e:
        raise HTTPException(status_code=422, detail=str(e)) from e


def _ensure_weights(cfg: pl.PipelineConfig, out_dir: Path) -> Path:
    if cfg.weights_path:
        return Path(cfg.weights_path)
    path = out_dir / f"weights_seed{cfg.seed}.bin"
    if not path.exists():
        pl.make_weights(cfg.seed, cfg, path)
    cfg.weights_path = str(path)
    return path


# -- share -----------------------------------------------------------------------


class ShareRequest(BaseModel):
    image: ImageSource
    seed: int = 0
    out_dir: str = "out"
    config_path: str | None = None
    overrides: ConfigOverrides | None = None


class ShareResponse(BaseModel):
    share1_path: str
    share2_path: str
    chi2_pvalues: list[float]
    reconstruct_ok: bool


def do_share(req: ShareRequest) -> ShareResponse:
    cfg = _config(req.config_path, req.overrides)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img = req.image.load()
    rng = np.random.default_rng(np.random.PCG64(req.seed))
    s1, s2, _ = pl.split_image(img, rng, cfg.codec())
    p1 = out / f"share1_seed{req.seed}.pgm"
    p2 = out / f"share2_seed{req.seed}.pgm"
    gray1 = s1 if s1.ndim == 2 else s1[0]
    gray2 = s2 if s2.ndim == 2 else s2[0]
    pl.save_pgm(gray1, p1)
    pl.save_pgm(gray2, p2)
    pvals = []
    for share in (s1, s2):
        counts = np.bincount(share.reshape(-1), minlength=256)
        pvals.append(float(stats.chisquare(counts).pvalue))
    ok = bool((pl.reconstruct_share_images(s1, s2) == img).all())
    return ShareResponse(
        share1_path=str(p1), share2_path=str(p2), chi2_pvalues=pvals, reconstruct_ok=ok
    )


@app.post("/share", response_model=ShareResponse)
def share_endpoint(req: ShareRequest) -> ShareResponse:
    return do_share(req)


# -- dealer -----------------------------------------------------------------------


class DealerRequest(BaseModel):
    seed: int = 0
    out_dir: str = "out"
    counts: dict[str, int] | None = None
    config_path: str | None = None
    overrides: ConfigOverrides | None = None


class DealerResponse(BaseModel):
    party1_path: str
    party2_path: str
    counts: dict[str, int]


def do_dealer(req: DealerRequest) -> DealerResponse:
    cfg = _config(req.config_path, req.overrides)
    spec = req.counts
    if not spec:
        rng = np.random.default_rng(np.random.PCG64(cfg.seed))
        backbone, _ = pl.build_desk_network(rng, cfg)
        spec = pl._infer_needs(cfg, backbone)
    p1, p2 = dealer_mod.dealer_serve(req.seed, spec, req.out_dir, cfg.codec())
    return DealerResponse(party1_path=str(p1), party2_path=str(p2), counts=spec)


@app.post("/dealer", response_model=DealerResponse)
def dealer_endpoint(req: DealerRequest) -> DealerResponse:
    return do_dealer(req)


# -- inference --------------------------------------------------------------------


class InferRequest(BaseModel):
    image: ImageSource
    out_dir: str = "out"
    config_path: str | None = None
    overrides: ConfigOverrides | None = None


class Detection(BaseModel):
    box: list[float]
    class_label: int
    confidence: float


class OracleResponse(BaseModel):
    detections: list[Detection]
    detections_path: str
    weights_path: str


def _load_net(cfg: pl.PipelineConfig, out: Path):
    weights = _ensure_weights(cfg, out)
    return pl.load_weights(weights, cfg.codec())


def do_oracle(req: InferRequest) -> OracleResponse:
    cfg = _config(req.config_path, req.overrides)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone, head = _load_net(cfg, out)
    dets, _ = pl.oracle_infer(req.image.load(), backbone, head, cfg)
    path = out / "oracle_detections.jsonl"
    pl.write_detections_jsonl(dets, path)
    return OracleResponse(
        detections=[Detection(**d.as_dict()) for d in dets],
        detections_path=str(path),
        weights_path=str(cfg.weights_path),
    )


@app.post("/oracle", response_model=OracleResponse)
def oracle_endpoint(req: InferRequest) -> OracleResponse:
    return do_oracle(req)


class InferResponse(BaseModel):
    detections: list[Detection]
    detections_path: str
    transcript_path: str | None
    error_report: dict
    rounds: int
    bytes_total: int


def do_infer(req: InferRequest) -> InferResponse:
    cfg = _config(req.config_path, req.overrides)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone, head = _load_net(cfg, out)
    try:
        dets, transcript, report, _ = pl.secure_infer(req.image.load(), backbone, head, cfg)
    except SecdetError as e:
        raise HTTPException(status_code=500, detail=str(e)) from e
    path = out / "secure_detections.jsonl"
    pl.write_detections_jsonl(dets, path)
    tpath = None
    rounds = 0
    total = 0
    if transcript is not None:
        tpath = out / "transcript.json"
        tpath.write_text(transcript.to_json())
        totals = transcript.totals()
        rounds = totals["rounds"]
        total = totals["bytes_sent"][1] + totals["bytes_sent"][2]
    return InferResponse(
        detections=[Detection(**d.as_dict()) for d in dets],
        detections_path=str(path),
        transcript_path=str(tpath) if tpath else None,
        error_report=report,
        rounds=rounds,
        bytes_total=total,
    )


@app.post("/infer", response_model=InferResponse)
def infer_endpoint(req: InferRequest) -> InferResponse:
    return do_infer(req)


# -- compare ------------------------------------------------------------------------


class CompareResponse(BaseModel):
    error_report: dict
    account_rows: list[dict]
    kept_secure: list[int]
    kept_oracle: list[int]


def do_compare(req: InferRequest) -> CompareResponse:
    cfg = _config(req.config_path, req.overrides)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backbone, head = _load_net(cfg, out)
    img = req.image.load()
    dets, transcript, report, extra = pl.secure_infer(img, backbone, head, cfg)
    rows = []
    if transcript is not None:
        grid = 8
        rows = account(
            transcript,
            {"exp": grid * grid, "comp": grid * grid, "ds": cfg.anchor_count, "bn": 1, "conv": 1},
        )
    kept_oracle = [int(i) for i in extra["oracle"]["kept"]]
    kept_secure = [int(d) for d in range(len(dets))]
    return CompareResponse(
        error_report=report,
        account_rows=[{k: _jsonable(v) for k, v in r.items()} for r in rows],
        kept_secure=kept_secure,
        kept_oracle=kept_oracle,
    )


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


@app.post("/compare", response_model=CompareResponse)
def compare_endpoint(req: InferRequest) -> CompareResponse:
    return do_compare(req)


# -- bench -------------------------------------------------------------------------


class BenchRequest(BaseModel):
    sizes: list[int] = Field(default_factory=lambda: [1000, 10000])
    protocols: list[str] = Field(default_factory=lambda: ["comp", "exp", "ds"])
    out_dir: str = "out"
    config_path: str | None = None
    overrides: ConfigOverrides | None = None
    repeats: int = 3


class BenchResponse(BaseModel):
    rows: list[dict]
    csv_path: str


def do_bench(req: BenchRequest) -> BenchResponse:
    cfg = _config(req.config_path, req.overrides)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = pl.bench(cfg, req.sizes, tuple(req.protocols), repeats=req.repeats)
    path = out / "bench.csv"
    pl.write_bench_csv(rows, path)
    return BenchResponse(rows=rows, csv_path=str(path))


@app.post("/bench", response_model=BenchResponse)
def bench_endpoint(req: BenchRequest) -> BenchResponse:
    return do_bench(req)


# -- misc --------------------------------------------------------------------------


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "service": "secdet"}


@app.get("/config/default")
def default_config() -> dict:
    return asdict(pl.PipelineConfig())
