import numpy as np
import pytest

from lvseg.phantom import PhantomSpec, generate_phantom_study


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom_study(PhantomSpec(seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom_seeds(phantom):
    """(slices, seeds) the pipeline would use on the shared phantom."""
    from lvseg.pipeline import PipelineConfig, seed_masks, selected_masks
    from lvseg.volume_io import extract_slices

    cfg = PipelineConfig()
    slices = extract_slices(phantom.volume)
    seeds = seed_masks(selected_masks(slices, cfg), phantom.classes, cfg.registry, cfg)
    return slices, seeds


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""

    def record(number: int, title: str, ok: bool | None, detail: str = "") -> bool:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2} {status}  {title}"
        if detail:
            line += f"  ({detail})"
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
