"""Seeded synthetic worlds with planted structure, used by tests and experiment scripts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .air import ProjectionModel
from .encoders import FileEncoder, WordEmbeddingTable, write_embeddings
from .features import AspectDoc, ContextSentence
from .kg import AspectImageLink, AspectKG, AspectNode, EntityRecord, ImageRef
from .ltr import FeatureRow, QueryList

ASPECT_LABELS = (
    "Geography", "History", "Economy", "Culture", "Education", "Demographics", "Politics", "Climate",
    "Transportation", "Sports", "Media", "Religion", "Architecture", "Cuisine", "Tourism", "Military",
    "Science", "Music", "Literature", "Film", "Health", "Law", "Agriculture", "Energy",
    "Environment", "Languages", "Festivals", "Infrastructure", "Administration", "Awards", "Legacy",
    "Early life", "Career", "Personal life", "Reception", "Production", "Plot", "Cast", "Campus", "Research",
)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


# -- learning-to-rank fixtures ------------------------------------------------------

def planted_ltr_corpus(n_queries: int = 200, n_candidates: int = 8, n_noise: int = 4, seed: int = 0,
                       signal: str = "label") -> list[QueryList]:
    """Query lists with one positive each.

    ``signal`` controls feature 0: "label" (equals the label), "inverse"
    (equals 1 - label) or "none" (pure noise).  Remaining features are noise.
    """
    rng = np.random.default_rng(seed)
    out = []
    for q in range(n_queries):
        pos = int(rng.integers(n_candidates))
        rows = []
        for c in range(n_candidates):
            label = int(c == pos)
            noise = rng.standard_normal(n_noise).tolist()
            if signal == "label":
                first = [float(label)]
            elif signal == "inverse":
                first = [float(1 - label)]
            elif signal == "none":
                first = []
            else:
                raise ValueError(signal)
            rows.append(FeatureRow(f"q{q:04d}", f"a{c:02d}", tuple(first + noise), label))
        out.append(QueryList(f"q{q:04d}", tuple(rows)))
    return out


# -- EAL world --------------------------------------------------------------------

@dataclass
class EalQuery:
    query_id: str
    context: ContextSentence
    candidates: list[AspectDoc]
    gold: str

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "entity_id": self.context.entity_id,
            "context": self.context.raw,
            "gold": self.gold,
            "candidates": [{"aspect_id": c.aspect_id, "name": c.name, "content": c.content} for c in self.candidates],
        }


@dataclass
class EalWorld:
    kg: AspectKG
    provider: FileEncoder
    table: WordEmbeddingTable
    queries: list[EalQuery]
    vectors: dict = field(default_factory=dict)
    word_vectors: dict = field(default_factory=dict)

    def write(self, directory) -> None:
        from .kg import save_kg

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_kg(self.kg, directory / "kg")
        write_embeddings(directory / "embeddings.jsonl", self.vectors)
        write_embeddings(directory / "word_vectors.jsonl", self.word_vectors)
        with open(directory / "eal.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for q in self.queries:
                fh.write(json.dumps(q.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_eal_queries(path) -> list[EalQuery]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(EalQuery(
                d["query_id"],
                ContextSentence(d["context"], d["entity_id"]),
                [AspectDoc(c["aspect_id"], c["name"], c.get("content", "")) for c in d["candidates"]],
                d["gold"],
            ))
    return out


def _topic_stem(label: str) -> str:
    return "".join(ch for ch in label.lower() if ch.isalnum())[:5]


def eal_world(n_queries: int = 600, n_entities: int = 60, n_aspects: int = 6, dim: int = 32, seed: int = 0,
              image_signal: float = 0.3, name_rate: float = 0.3, topic_words: int = 2,
              distractor_words: int = 1) -> EalWorld:
    """Entities with first-level aspects, aspect texts, word vectors and aspect images.

    Contexts carry weak lexical evidence for their gold aspect (an occasional
    name mention plus a few topic words among distractors) and their text
    embedding leans towards the gold aspect's image direction by
    ``image_signal``.
    """
    rng = np.random.default_rng(seed)
    labels = list(ASPECT_LABELS)
    n_topic = 30
    common = [f"w{i}" for i in range(300)]
    topic = {l: [f"{_topic_stem(l)}{j}" for j in range(n_topic)] for l in labels}

    word_dir = {l: _unit(rng.standard_normal(dim)) for l in labels}
    words = {}
    for l in labels:
        for w in topic[l]:
            words[w] = _unit(word_dir[l] + 1.2 * _unit(rng.standard_normal(dim)))
        for tok in l.lower().split():
            words.setdefault(tok, _unit(word_dir[l] + 0.6 * _unit(rng.standard_normal(dim))))
    for w in common:
        words[w] = _unit(rng.standard_normal(dim))

    img_dir = {l: _unit(rng.standard_normal(dim)) for l in labels}
    vectors = {}
    for l in labels:
        vectors["t:" + l] = _unit(img_dir[l] + 0.5 * _unit(rng.standard_normal(dim)))

    entities, aspects, images, links = [], [], [], []
    ent_aspects = {}
    docs = {}
    for e in range(n_entities):
        eid = f"E{e:03d}"
        name = f"Entity{e:03d}"
        entities.append(EntityRecord(eid, name, "Sovereign State", (), int(rng.integers(1000))))
        vectors["t:" + name] = _unit(rng.standard_normal(dim))
        chosen = sorted(rng.choice(len(labels), size=n_aspects, replace=False).tolist())
        ent_aspects[eid] = [labels[i] for i in chosen]
        for l in ent_aspects[eid]:
            aspects.append(AspectNode(eid, (l,)))
            n_topic_words = 14
            content = list(rng.choice(topic[l], size=n_topic_words)) + list(rng.choice(common, size=26))
            rng.shuffle(content)
            docs[(eid, l)] = " ".join(content)
            for j in range(int(rng.integers(2, 9))):
                iid = f"{eid}-{_topic_stem(l)}-{j}"
                images.append(ImageRef(iid, f"synthetic:{iid}", "wikipedia"))
                links.append(AspectImageLink(eid, (l,), iid))
                vectors["i:" + iid] = _unit(img_dir[l] + 0.9 * _unit(rng.standard_normal(dim)))

    queries = []
    for q in range(n_queries):
        eid = entities[int(rng.integers(n_entities))].id
        name = f"Entity{eid[1:]}"
        labs = ent_aspects[eid]
        gold = labs[int(rng.integers(len(labs)))]
        toks = [name.lower()]
        if rng.random() < name_rate:
            toks += gold.lower().split()
        toks += list(rng.choice(topic[gold], size=topic_words))
        others = [l for l in labs if l != gold]
        for _ in range(distractor_words):
            toks.append(str(rng.choice(topic[others[int(rng.integers(len(others)))]])))
        toks += list(rng.choice(common, size=8))
        rng.shuffle(toks)
        raw = " ".join(toks) + "."
        raw = f"q{q} " + raw  # keeps every context string (and embedding key) unique
        vectors["t:" + raw] = _unit(image_signal * img_dir[gold] + _unit(rng.standard_normal(dim)))
        cands = [AspectDoc(f"{eid}/{l}", l, docs[(eid, l)]) for l in labs]
        queries.append(EalQuery(f"q{q:04d}", ContextSentence(raw, eid), cands, f"{eid}/{gold}"))

    kg = AspectKG.build(entities, aspects, images, links)
    provider = FileEncoder.from_vectors(vectors)
    return EalWorld(kg, provider, WordEmbeddingTable(words), queries, vectors, words)


# -- AIR world ----------------------------------------------------------------------

@dataclass
class AirWorld:
    kg: AspectKG
    provider: FileEncoder
    vectors: dict


def air_world(n_entities: int = 60, n_aspects: int = 8, images_per_aspect: int = 12, n_labels: int = 16,
              dim: int = 32, seed: int = 0, text_image_overlap: float = 0.15, entity_weight: float = 1.0,
              aspect_weight: float = 0.8, noise: float = 0.8) -> AirWorld:
    """Images mix an entity identity direction, an aspect image direction and noise.

    Aspect label embeddings only partly align with the aspect image direction,
    so the raw text/image similarity is a weak cue while the pair (overall
    image, aspect) determines where the aspect images lie.
    """
    rng = np.random.default_rng(seed)
    labels = list(ASPECT_LABELS[:n_labels])
    vectors = {}
    text_dir = {l: _unit(rng.standard_normal(dim)) for l in labels}
    img_dir = {}
    rho = text_image_overlap
    for l in labels:
        perp = _unit(rng.standard_normal(dim))
        perp = _unit(perp - (perp @ text_dir[l]) * text_dir[l])
        img_dir[l] = rho * text_dir[l] + np.sqrt(1 - rho * rho) * perp
        vectors["t:" + l] = text_dir[l]
    entities, aspects, images, links = [], [], [], []
    for e in range(n_entities):
        eid = f"E{e:03d}"
        name = f"Entity{e:03d}"
        ident = _unit(rng.standard_normal(dim))
        entities.append(EntityRecord(eid, name, "Company", (), 0))
        vectors["t:" + name] = _unit(ident + 0.3 * _unit(rng.standard_normal(dim)))
        for li in sorted(rng.choice(n_labels, size=n_aspects, replace=False).tolist()):
            l = labels[li]
            aspects.append(AspectNode(eid, (l,)))
            for j in range(images_per_aspect):
                iid = f"{eid}-{li:02d}-{j:02d}"
                images.append(ImageRef(iid, f"synthetic:{iid}", "wikipedia"))
                links.append(AspectImageLink(eid, (l,), iid))
                vectors["i:" + iid] = _unit(entity_weight * ident + aspect_weight * img_dir[l]
                                            + noise * _unit(rng.standard_normal(dim)))
    kg = AspectKG.build(entities, aspects, images, links)
    return AirWorld(kg, FileEncoder.from_vectors(vectors), vectors)


# -- correction / expansion world -------------------------------------------------------

@dataclass
class PlantedKG:
    kg: AspectKG
    provider: FileEncoder
    model: ProjectionModel
    planted: set  # link keys of off-aspect images
    new_images: list  # (image_id, entity_id, true label)
    vectors: dict = field(default_factory=dict)


def planted_correction_world(n_entities: int = 20, n_aspects: int = 4, images_per_aspect: int = 5,
                             n_new: int = 200, dim: int = 32, seed: int = 0, noise: float = 0.35) -> PlantedKG:
    """Aspect groups of on-topic images plus one planted off-aspect image each, and
    ``n_new`` unlinked images whose true aspect is known."""
    rng = np.random.default_rng(seed)
    labels = list(ASPECT_LABELS[: max(n_aspects * 3, 12)])
    text_dir = {l: _unit(rng.standard_normal(dim)) for l in labels}
    vectors = {"t:" + l: v for l, v in text_dir.items()}
    entities, aspects, images, links = [], [], [], []
    planted = set()
    ent_labels = {}
    for e in range(n_entities):
        eid = f"E{e:03d}"
        name = f"Entity{e:03d}"
        entities.append(EntityRecord(eid, name, "War", (), 0))
        vectors["t:" + name] = _unit(rng.standard_normal(dim))
        chosen = [labels[i] for i in sorted(rng.choice(len(labels), size=n_aspects, replace=False).tolist())]
        ent_labels[eid] = chosen
        outside = [l for l in labels if l not in chosen]
        for l in chosen:
            aspects.append(AspectNode(eid, (l,)))
            for j in range(images_per_aspect):
                iid = f"{eid}-{_topic_stem(l)}-{j}"
                images.append(ImageRef(iid, f"synthetic:{iid}", "wikipedia"))
                links.append(AspectImageLink(eid, (l,), iid))
                vectors["i:" + iid] = _unit(text_dir[l] + noise * _unit(rng.standard_normal(dim)))
            off = outside[int(rng.integers(len(outside)))]
            iid = f"{eid}-{_topic_stem(l)}-off"
            images.append(ImageRef(iid, f"synthetic:{iid}", "search-engine", "planted", 5))
            links.append(AspectImageLink(eid, (l,), iid))
            vectors["i:" + iid] = _unit(text_dir[off] + noise * _unit(rng.standard_normal(dim)))
            planted.add((eid, (l,), iid))
    new_images = []
    for n in range(n_new):
        eid = entities[int(rng.integers(n_entities))].id
        l = ent_labels[eid][int(rng.integers(n_aspects))]
        iid = f"new-{n:04d}"
        vectors["i:" + iid] = _unit(text_dir[l] + 2 * noise * _unit(rng.standard_normal(dim)))
        new_images.append((iid, eid, l))
    kg = AspectKG.build(entities, aspects, images, links)
    model = ProjectionModel.text_passthrough(dim, dim)
    return PlantedKG(kg, FileEncoder.from_vectors(vectors), model, planted, new_images, vectors)


# -- page fixtures for the build pipeline --------------------------------------------------

def demo_pages(seed: int = 0, n_entities: int = 4):
    """Small MediaWiki-like pages, candidate entities and a search fixture index."""
    rng = np.random.default_rng(seed)
    pages, candidates, index = {}, [], {}
    for e in range(n_entities):
        eid = f"Q{100 + e}"
        name = f"Placeville {e}"
        candidates.append(EntityRecord(eid, name, "State (US)", (f"PV{e}",), int(rng.integers(100, 10000))))
        body = [f"<html><head><title>{name}</title></head><body><h1>{name}</h1>",
                f"<p>{name} is a place.</p>"]
        for l in ("Geography", "History", "Economy"):
            body.append(f'<h2><span class="mw-headline">{l}</span><span class="mw-editsection">[edit]</span></h2>')
            body.append(f"<p>The {l.lower()} of {name} is notable. Nothing else here. "
                        f"PV{e} has a long {l.lower()} record!</p>")
            body.append(f'<img src="/images/{eid}_{l}.jpg">')
            index[f"The {l.lower()} of {name} is notable."] = [f"{eid}-{l}-s{r}" for r in range(7)]
            if l == "Geography":
                body.append("<h3>Rivers</h3>")
                body.append(f"<p>Rivers cross {name}.</p>")
                body.append(f'<img src="/images/{eid}_rivers.jpg">')
        body.append("<h2>References</h2><h3>Sources</h3><p>Cited in Placeville books.</p></body></html>")
        pages[eid] = "\n".join(body)
    return pages, candidates, index


def write_demo_workspace(directory, seed: int = 0) -> dict:
    """Materialize small inputs for every CLI stage under ``directory``.

    Returns the paths keyed by role (pages, entities, fixtures, eal, air, new_images).
    """
    from .kg import save_kg

    root = Path(directory)
    pages, candidates, index = demo_pages(seed)
    (root / "pages").mkdir(parents=True, exist_ok=True)
    for eid, html in pages.items():
        (root / "pages" / f"{eid}.html").write_text(html, encoding="utf-8")
    with open(root / "entities.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for e in candidates:
            rec = {"id": e.id, "name": e.name, "entity_type": e.entity_type, "aliases": list(e.aliases),
                   "pageviews": e.pageviews}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (root / "fixtures").mkdir(exist_ok=True)
    (root / "fixtures" / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")

    eal_world(n_queries=80, n_entities=12, seed=seed).write(root / "eal")

    air = air_world(n_entities=16, n_aspects=4, images_per_aspect=6, seed=seed)
    save_kg(air.kg, root / "air" / "kg")
    write_embeddings(root / "air" / "embeddings.jsonl", air.vectors)

    planted = planted_correction_world(n_entities=6, n_new=20, seed=seed)
    save_kg(planted.kg, root / "planted" / "kg")
    write_embeddings(root / "planted" / "embeddings.jsonl", planted.vectors)
    planted.model.save(root / "planted" / "passthrough.json")
    with open(root / "planted" / "new_images.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for iid, eid, _ in planted.new_images:
            fh.write(json.dumps({"entity_id": eid, "image_id": iid}, sort_keys=True) + "\n")
    return {
        "pages": root / "pages",
        "entities": root / "entities.jsonl",
        "fixtures": root / "fixtures",
        "eal": root / "eal",
        "air": root / "air",
        "planted": root / "planted",
    }

