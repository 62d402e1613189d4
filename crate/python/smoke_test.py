"""Smoke test for the textinv_py extension.

Build and stage the module first:

    cargo build --release -p textinv-py --features extension-module
    cp target/release/libtextinv_py.so python/textinv_py.so
"""
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import textinv_py as ti


def main():
    text = ti.default_config()
    assert "schedule.steps = 64" in text, text
    h = ti.config_hash()
    assert len(h) == 16 and h == ti.config_hash(text)
    assert ti.config_hash(overrides=["generate.strength=0.9"]) == h
    assert ti.config_hash(overrides=["backbone.channels=16"]) != h
    try:
        ti.config_hash(overrides=["no.such.key=1"])
        raise AssertionError("unknown key accepted")
    except ValueError:
        pass

    ab = ti.alpha_bars(10, 1e-4, 2e-2)
    assert len(ab) == 10
    assert abs(ab[0] - (1 - 1e-4)) < 1e-12
    assert all(a > b for a, b in zip(ab, ab[1:]))

    hw = 4 * 4
    x = [((i * 37) % 11) / 10 for i in range(3 * hw)]
    y = [((i * 13) % 7) / 6 for i in range(3 * hw)]
    out = ti.tone_transfer(x, y, 4, 4)
    for c in range(3):
        o, t = out[c * hw:(c + 1) * hw], y[c * hw:(c + 1) * hw]
        mo, mt = sum(o) / hw, sum(t) / hw
        so = math.sqrt(sum((v - mo) ** 2 for v in o) / hw)
        st = math.sqrt(sum((v - mt) ** 2 for v in t) / hw)
        assert abs(mo - mt) < 1e-4 and abs(so - st) < 1e-4
    print("textinv_py smoke test ok, default config hash", h)


if __name__ == "__main__":
    main()
