import pytest

from implicit_agg.synth import SynthSpec, generate

# toy-backbone sized corpus: 28x28 images, a handful of places per pool
TINY = dict(num_places=10, views_per_place=4, image_size=28, confuser_pairs=2,
            max_shift_px=3, landmark_size=8, train_places=12, val_places=6, seed=0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate(SynthSpec(**TINY), out)
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
