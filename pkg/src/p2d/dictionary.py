"""Pre-defined keyword dictionary used for semantic matching.

The dictionary maps landscape categories (mountain, water, tree, sky, ...) to
keywords, and each keyword to the text prompt fed to the text encoder. Stored
as TSV so it can be reviewed and edited by hand.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import DuplicateEntry, DictionaryEmpty, IncompatibleManifest, NotFound

DICTIONARY_FORMAT_VERSION = 1

DEFAULT_PROMPT_TEMPLATE = "a photo of a {keyword}"

# Keywords per category for classical oriental landscape subjects. Water gets
# finer-grained keywords because waterfalls, streams, and lakes photograph very
# differently while sharing one painted vocabulary.
DEFAULT_CATEGORIES: dict[str, tuple[str, ...]] = {
    "mountain": ("mountain", "mountain peak", "rocky cliff", "mountain ridge"),
    "water": ("waterfall", "stream", "river", "lake", "pond", "sea waves"),
    "tree": ("pine tree", "bamboo grove", "forest", "bare tree branches"),
    "sky": ("cloudy sky", "mist", "moon in the night sky"),
    "settlement": ("village house", "pavilion", "temple", "wooden bridge", "fishing boat"),
}


@dataclass(frozen=True)
class DictionaryEntry:
    category: str
    keyword: str
    prompt: str

    def __post_init__(self) -> None:
        if (not self.category.strip() or not self.keyword.strip()
                or not self.prompt.strip()):
            raise ValueError("dictionary entry fields must be non-empty")


@dataclass(frozen=True)
class Dictionary:
    entries: tuple[DictionaryEntry, ...]
    version: str = "1"

    def __post_init__(self) -> None:
        if not self.entries:
            raise DictionaryEmpty("dictionary has no entries")
        seen: set[tuple[str, str]] = set()
        for e in self.entries:
            key = (e.category, e.keyword)
            if key in seen:
                raise DuplicateEntry(f"duplicate dictionary entry {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.entries)

    def prompts(self) -> list[str]:
        return [e.prompt for e in self.entries]

    def categories(self) -> list[str]:
        out: list[str] = []
        for e in self.entries:
            if e.category not in out:
                out.append(e.category)
        return out


def build_dictionary(
    categories: Mapping[str, Sequence[str]],
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
    category_templates: Mapping[str, str] | None = None,
    version: str = "1",
) -> Dictionary:
    """Expand a {category: keywords} mapping into prompt entries.

    Entries are sorted by (category, keyword) so the embedding matrix layout is
    stable across runs regardless of input ordering.
    """
    category_templates = category_templates or {}
    entries: list[DictionaryEntry] = []
    for category in sorted(categories):
        template = category_templates.get(category, prompt_template)
        for keyword in sorted(categories[category]):
            entries.append(DictionaryEntry(
                category=category,
                keyword=keyword,
                prompt=template.format(keyword=keyword),
            ))
    return Dictionary(entries=tuple(entries), version=version)


def default_dictionary() -> Dictionary:
    return build_dictionary(DEFAULT_CATEGORIES, version="builtin-1")


def save_dictionary(dictionary: Dictionary, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# p2d-dictionary\tformat={DICTIONARY_FORMAT_VERSION}"
                 f"\tversion={dictionary.version}\n")
        fh.write("# category\tkeyword\tprompt\n")
        for e in dictionary.entries:
            fh.write(f"{e.category}\t{e.keyword}\t{e.prompt}\n")


def load_dictionary(path: str | Path) -> Dictionary:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"dictionary {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# p2d-dictionary\t"):
        raise IncompatibleManifest(f"dictionary {path}: missing format header")
    meta = dict(
        part.split("=", 1) for part in lines[0].split("\t")[1:] if "=" in part
    )
    if meta.get("format") != str(DICTIONARY_FORMAT_VERSION):
        raise IncompatibleManifest(
            f"dictionary {path}: format {meta.get('format')!r} not supported"
        )
    entries: list[DictionaryEntry] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise IncompatibleManifest(
                f"dictionary {path}:{lineno}: expected 3 tab-separated fields"
            )
        entries.append(DictionaryEntry(*parts))
    if not entries:
        raise DictionaryEmpty(f"dictionary {path} has no entries")
    return Dictionary(entries=tuple(entries), version=meta.get("version", "1"))
