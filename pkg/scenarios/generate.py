"""Regenerate the golden scenario files in this directory.

    python scenarios/generate.py
"""

from __future__ import annotations

from pathlib import Path

from edgereid.embedsim import EmbeddingConfig, NetworkConfig, Segment, format_scenario, scripted_scenario

HERE = Path(__file__).resolve().parent


def main() -> None:
    noiseless = EmbeddingConfig(dim=8, alpha=0.3, separation=1.0, seed=11, noise=0.0)
    scenes = {
        "single.txt": scripted_scenario([Segment(0, 0, 0, 10, 100, 100, 2, 0)], {0: 10}, noiseless),
        "handoff.txt": scripted_scenario(
            [Segment(0, 1, 0, 10, 100, 100, 1, 0), Segment(0, 2, 20, 30, 500, 100, 1, 0)],
            {1: 30, 2: 30},
            noiseless,
        ),
        # two people crossing in camera 0, one later walking into camera 1,
        # over a slow and jittery link with a camera-1 outage
        "crossing.txt": scripted_scenario(
            [
                Segment(1, 0, 0, 30, 0, 100, 8, 0),
                Segment(2, 0, 0, 30, 240, 100, -8, 0),
                Segment(1, 1, 42, 60, 60, 80, 4, 1),
            ],
            {0: 60, 1: 60},
            EmbeddingConfig(dim=8, alpha=0.3, separation=3.0, seed=5, box=10.0, noise=1.0),
            NetworkConfig(latency=3, jitter=2, outages=((1, 40, 50),)),
        ),
    }
    for name, sc in scenes.items():
        (HERE / name).write_text(format_scenario(sc), encoding="utf-8")


if __name__ == "__main__":
    main()
