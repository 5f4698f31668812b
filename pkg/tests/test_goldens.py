"""The shipped protocol corpus must match what the library produces."""

from .goldengen import PROTOCOLS, generate


def test_corpus_matches_generator():
    files = generate()
    for rel, contents in sorted(files.items()):
        on_disk = (PROTOCOLS / rel).read_text()
        assert on_disk == contents, f"protocols/{rel} is stale; run " \
                                    f"`python -m tests.goldengen`"


def test_no_stray_files():
    files = generate()
    on_disk = {str(p.relative_to(PROTOCOLS))
               for p in PROTOCOLS.rglob("*") if p.is_file()}
    assert on_disk == set(files)
