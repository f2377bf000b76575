"""Writes the fixture files under fixtures/.

The embedding file is packed here with `struct`, independently of the Rust
writer, so the loader tests double as a cross-language format check.
Run from the repository root: python3 fixtures/make_fixtures.py
"""

import json
import struct
from pathlib import Path

ROOT = Path(__file__).resolve().parent
DIM = 8


def unit(i, scale=1.0):
    v = [0.0] * DIM
    v[i] = scale
    return v


def add(*vs):
    return [sum(x) for x in zip(*vs)]


# (sample_id, [(token, embedding)], region)
LCA_RECORDS = [
    # word 2 equals the region vector, every other word is orthogonal to it
    (
        "lca-001",
        [("the", unit(1)), ("red", unit(2)), ("car", unit(0)), ("near", unit(3)), ("left", unit(4))],
        unit(0),
    ),
    # two words close to the region, one weakly related, three unrelated
    (
        "lca-002",
        [
            ("a", unit(6)),
            ("white", add(unit(0), unit(1))),
            ("van", add(unit(0), unit(1), unit(2, 0.5))),
            ("parked", unit(3)),
            ("far", add(unit(4), unit(0, 0.25))),
            ("away", unit(5)),
        ],
        add(unit(0), unit(1)),
    ),
    # every word scores the same: nothing to split
    (
        "lca-003",
        [("the", unit(2)), ("tall", unit(2)), ("truck", unit(2))],
        add(unit(2), unit(3)),
    ),
    # graded scores, the category word highest
    (
        "lca-004",
        [
            ("pedestrian", add(unit(0), unit(7, 0.25))),
            ("walking", add(unit(0, 0.25), unit(5))),
            ("on", unit(6)),
            ("the", unit(4)),
            ("sidewalk", add(unit(0, 0.5), unit(3))),
        ],
        unit(0),
    ),
]

LCA_EXPECTED_HIGH = {
    "lca-001": ["car"],
    "lca-002": ["white", "van"],
    "lca-003": [],
    "lca-004": ["pedestrian"],
}


def pack_embeddings(records):
    out = bytearray(b"EMBF")
    out += struct.pack("<III", 1, DIM, len(records))

    def string(s):
        b = s.encode("utf-8")
        return struct.pack("<I", len(b)) + b

    for sid, words, region in records:
        out += string(sid)
        out += struct.pack("<I", len(words))
        for tok, _ in words:
            out += string(tok)
        for _, vec in words:
            out += struct.pack(f"<{DIM}f", *vec)
        out += struct.pack(f"<{DIM}f", *region)
    return bytes(out)


def box3d(x, z, length, width=1.6, height=1.5, yaw=0.0):
    return {"center": [x, 1.5, z], "dims": [length, width, height], "yaw": yaw}


def annotation(sid, image, caption, category, b3, occlusion=0, truncation=0.0):
    return {
        "sample_id": sid,
        "image_id": image,
        "caption": caption,
        "category": category,
        "gt_box3d": b3,
        "gt_box2d": [500.0, 150.0, 620.0, 230.0],
        "occlusion": occlusion,
        "truncation": truncation,
        "calib_ref": "000000",
    }


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r, separators=(",", ":")) + "\n" for r in rows))


CALIB = (
    "P0: 7.070493e+02 0.000000e+00 6.040814e+02 0.000000e+00 0.000000e+00 7.070493e+02 "
    "1.805066e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n"
    "P2: 7.070493e+02 0.000000e+00 6.040814e+02 0.000000e+00 0.000000e+00 7.070493e+02 "
    "1.805066e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n"
)


def main():
    lca = ROOT / "lca"
    lca.mkdir(exist_ok=True)
    (lca / "embeddings.embf").write_bytes(pack_embeddings(LCA_RECORDS))
    write_jsonl(
        lca / "annotations.jsonl",
        [
            annotation(sid, f"img-{i}", " ".join(t for t, _ in words), "car", box3d(0.0, 10.0 + i, 4.0))
            for i, (sid, words, _) in enumerate(LCA_RECORDS)
        ],
    )
    (lca / "expected_high.json").write_text(json.dumps(LCA_EXPECTED_HIGH, indent=2) + "\n")

    # Each prediction slides the ground-truth box along its length, so
    # IoU = (l - s) / (l + s): 0.3, 0.6 and 0.1.
    ev = ROOT / "eval"
    (ev / "calib").mkdir(parents=True, exist_ok=True)
    (ev / "calib" / "000000.txt").write_text(CALIB)
    cases = [("ev-1", 3.9, 2.1), ("ev-2", 4.0, 1.0), ("ev-3", 4.4, 3.6)]
    anns, preds = [], []
    for i, (sid, length, shift) in enumerate(cases):
        gt = box3d(0.0, 10.0, length)
        anns.append(annotation(sid, f"img-{i}", "the car in front", "car", gt))
        preds.append({"sample_id": sid, "box3d": box3d(shift, 10.0, length)})
    write_jsonl(ev / "annotations.jsonl", anns)
    write_jsonl(ev / "predictions.jsonl", preds)
    # the same predictions given as projected center, depth, size and yaw
    fx, cx, cy = 7.070493e02, 6.040814e02, 1.805066e02
    projected = [
        {
            "sample_id": p["sample_id"],
            "center_2d": [cx + fx * p["box3d"]["center"][0] / 10.0, cy + fx * 1.5 / 10.0],
            "depth": 10.0,
            "dims": p["box3d"]["dims"],
            "yaw": 0.0,
        }
        for p in preds
    ]
    write_jsonl(ev / "predictions_projected.jsonl", projected)


if __name__ == "__main__":
    main()
