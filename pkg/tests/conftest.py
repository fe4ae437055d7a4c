from pathlib import Path

import pytest

from aspectkg.kg import AspectImageLink, AspectKG, AspectNode, EntityRecord, ImageRef

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def small_kg():
    """2 entities, 3 aspects, 4 links over 4 images."""
    entities = [
        EntityRecord("Q99", "California", "State (US)", ("Golden State",), 5000),
        EntityRecord("Q312", "Apple Inc", "Company", (), 9000),
    ]
    aspects = [
        AspectNode("Q99", ("Geography",)),
        AspectNode("Q99", ("Geography", "Rivers")),
        AspectNode("Q312", ("History",)),
    ]
    images = [
        ImageRef("img-a", "file:a.jpg", "wikipedia"),
        ImageRef("img-b", "file:b.jpg", "search-engine", "California is bordered by Oregon.", 1),
        ImageRef("img-c", "file:c.jpg", "search-engine", "California is bordered by Oregon.", 2),
        ImageRef("img-d", "file:d.jpg", "wikipedia"),
    ]
    links = [
        AspectImageLink("Q99", ("Geography",), "img-a", 0.7),
        AspectImageLink("Q99", ("Geography", "Rivers"), "img-a", 0.4),
        AspectImageLink("Q99", ("Geography", "Rivers"), "img-b"),
        AspectImageLink("Q312", ("History",), "img-d", -0.2),
    ]
    return AspectKG.build(entities, aspects, images, links)


def _snapshot(root: Path) -> dict:
    """Bytes of every file under ``root``; manifest timestamps are dropped."""
    import json

    snap = {}
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        data = p.read_bytes()
        if p.name == "manifest.json":
            m = json.loads(data)
            m.pop("timestamp")
            data = json.dumps(m, sort_keys=True).encode()
        snap[p.relative_to(root).as_posix()] = data
    return snap


@pytest.fixture(scope="session")
def demo_runs(tmp_path_factory):
    """Run the demo CLI pipeline twice into the same directory; return exit codes and snapshots."""
    import json

    from aspectkg.cli import main
    from aspectkg.experiments import DEMO_CONFIG, demo_pipeline_commands
    from aspectkg.synthetic import write_demo_workspace

    root = tmp_path_factory.mktemp("demo")
    work, out = root / "work", root / "out"
    write_demo_workspace(work)
    (work / "config.json").write_text(json.dumps(DEMO_CONFIG), encoding="utf-8")
    runs = []
    for _ in range(2):
        codes = [(argv[0], main(argv)) for argv in demo_pipeline_commands(work, out)]
        runs.append((codes, _snapshot(out)))
    return {"work": work, "out": out, "runs": runs}


# -- acceptance reporting ------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    _CRITERIA.setdefault(n, (title, []))[1].append("passed" if rep.passed else rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[n]
        verdict = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}")
