import sysconfig
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)


def stdlib_sources(min_bytes: int) -> bytes:
    """Concatenated Python stdlib sources, in sorted path order, up to ``min_bytes``."""
    root = Path(sysconfig.get_paths()["stdlib"])
    files = sorted(p for p in root.rglob("*.py") if "test" not in p.parts and "site-packages" not in p.parts)
    buf = bytearray()
    for f in files:
        buf += f.read_bytes()
        if len(buf) >= min_bytes:
            return bytes(buf)
    raise RuntimeError(f"stdlib has only {len(buf)} bytes of sources")


@pytest.fixture(scope="session")
def small_corpus_file(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("corpus") / "small.txt"
    path.write_bytes(stdlib_sources(300_000))
    return path


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, title: str, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {title} -- {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
