#!/usr/bin/env python3
"""Independent parser for the golden signal file.

Decodes the binary layout from scratch with the struct module: magic "ECGW",
version u16, channel count u16, sample count u32, sampling rate f64, a
reserved u64 (all little-endian), one lead tag byte per channel (position in
the canonical lead order), then row-major f32 samples. Verifies every field
against the fixture's parameters and the documented sample formula
value(c, i) = i * 0.125 - c * 0.5, and reports the byte count and SHA-256.
Usage: python3 binary_io.py <fixtures_dir>.
"""
import hashlib
import json
import os
import struct
import sys

CANONICAL_LEADS = [
    "I", "II", "III", "aVR", "aVL", "aVF",
    "V1", "V2", "V3", "V4", "V5", "V6",
]


def main():
    root = sys.argv[1]
    man = json.load(open(os.path.join(root, "manifest.json")))
    out = {}
    for f in man["fixtures"]:
        if f["operation"] != "ecgw_bytes":
            continue
        p = f["params"]
        path = os.path.join(root, f["inputs"][0])
        blob = open(path, "rb").read()
        magic, version, n_ch, n_samp, fs, reserved = struct.unpack_from(
            "<4sHHIdQ", blob, 0
        )
        assert magic == b"ECGW", f"magic {magic!r}"
        assert version == 1, f"version {version}"
        assert n_ch == len(p["leads"]), f"{n_ch} channels"
        assert n_samp == p["t"], f"{n_samp} samples"
        assert fs == p["fs"], f"rate {fs}"
        assert reserved == 0, f"reserved {reserved}"
        offset = struct.calcsize("<4sHHIdQ")
        tags = blob[offset : offset + n_ch]
        want_tags = bytes(CANONICAL_LEADS.index(code) for code in p["leads"])
        assert tags == want_tags, f"lead tags {list(tags)}"
        offset += n_ch
        samples = struct.unpack_from(f"<{n_ch * n_samp}f", blob, offset)
        assert offset + 4 * n_ch * n_samp == len(blob), "trailing bytes"
        for c in range(n_ch):
            for i in range(n_samp):
                want = i * 0.125 - c * 0.5  # exactly representable in f32
                got = samples[c * n_samp + i]
                assert got == want, f"sample ({c},{i}): {got} vs {want}"
        out[f["id"]] = {
            "n_bytes": len(blob),
            "sha256": hashlib.sha256(blob).hexdigest(),
            "roundtrip_max_err": 0.0,
        }
    print(json.dumps(out))


if __name__ == "__main__":
    main()
