"""Generator for the bundled ~1K-entity fixture knowledge graph.

The fixture is invented data shaped like an encyclopedic KG: people,
places, organisations, works and awards, plus the awkward cases the
pipeline must handle (time terms, bookkeeping items, labels with digits,
an unlabeled item, names built from other names, an element named after a
person, dated facts and time qualifiers).
"""

from __future__ import annotations

import json
import random
from importlib import resources
from pathlib import Path

from .kg_store import Entity, Fact, KnowledgeGraph, Literal, Qualifier, load_kg

RELATIONS = {
    "P17": ("country", "sovereign state that this item is located in or belongs to, as recorded for places and organisations"),
    "P27": ("country of citizenship", "the object is a sovereign state that recognises the subject person as one of its citizens"),
    "P19": ("place of birth", "the most specific known settlement or location where the subject person was born"),
    "P69": ("educated at", "an educational institution that the subject person attended as a student, whether or not they graduated"),
    "P108": ("employer", "a person or organisation for which the subject works or worked as an employee or staff member"),
    "P166": ("award received", "an award, prize or honour that was given to the subject by some conferring body"),
    "P800": ("notable work", "a work of great significance that the subject person or organisation created or contributed to"),
    "P50": ("author", "the main creator of a written work such as a novel, essay, poem or collection of short stories"),
    "P131": ("located in", "the administrative territorial entity or settlement in which the subject item is situated"),
    "P1027": ("conferred by", "the person or organisation that grants or awards the subject award, prize or distinction"),
    "P54": ("member of sports team", "a sports club or team for which the subject person plays or played as a competitor"),
    "P101": ("field of work", "a specialisation, discipline or area of activity in which the subject person or group works"),
    "P138": ("named after", "the entity or event that inspired the name of the subject, either directly or indirectly"),
    "P127": ("owned by", "the person or organisation that owns or has ownership of the subject item or property"),
    "P36": ("capital", "the seat of government or main administrative city of the subject country or region"),
    "P569": ("date of birth", "the calendar date on which the subject person was born, given at the best known precision"),
    "P571": ("inception", "the date or point in time when the subject organisation, work or place came into existence"),
    "P577": ("publication date", "the date or point in time when the subject written work was first published or released"),
    "P1082": ("population", "the number of people inhabiting the subject place at the time of the latest census estimate"),
    "P585": ("point in time", "the time and date at which an event took place, existed, or a statement held true"),
    "P31": ("instance of", "the class of which the subject is a particular example and member"),
}

FIRST = ("Adele", "Bruno", "Cecily", "Dorian", "Elspeth", "Fabian", "Greta", "Hugo", "Imogen", "Jasper",
         "Katrin", "Leopold", "Mirela", "Nestor", "Odile", "Piers", "Quentin", "Rosalind", "Sigrid", "Tobias",
         "Ursula", "Viktor", "Wilma", "Xavier", "Yvonne", "Zeno", "Agnes", "Basil", "Clara", "Edmund",
         "Flora", "Gideon", "Hester", "Ivo", "Juno", "Konrad", "Lavinia", "Magnus", "Nora", "Osric")
SUR_A = ("Ash", "Brad", "Corn", "Dun", "Fair", "Gar", "Hol", "Kel", "Lang", "Mor", "North", "Pem", "Rad",
         "Stan", "Thorn", "Wel", "Whit", "Yar", "Bram", "Crom", "Elm", "Frost", "Glen", "Hart")
SUR_B = ("ford", "ley", "ton", "wick", "by", "ham", "more", "field", "well", "dale", "worth", "stead", "brook")
COUNTRIES = ("Albion", "Corvania", "Estmark", "Galdor", "Hesperia", "Lunaria", "Norvik", "Ostralia",
             "Pellmark", "Rhovan", "Sarnia", "Valoria")
CONCEPTS = ("physics", "chemistry", "folk music", "poetry", "botany", "astronomy", "sculpture",
            "cartography", "linguistics", "geology", "opera", "medicine", "oceanography", "philosophy",
            "architecture", "mathematics", "painting", "economics", "zoology", "archaeology")
BOOK_A = ("The Silent", "A Winter", "The Glass", "Under the", "The Last", "Beyond the", "The Hollow", "A Distant", "The Burning", "An Open")
BOOK_B = ("Harbour", "Orchard", "Lantern", "Meridian", "Citadel", "Tide", "Garden", "Archive", "Signal", "Crown",
          "Compass", "Furnace", "Ledger", "Mirror", "Quarry", "Ferry")


def _date(rng: random.Random, lo: int, hi: int) -> str:
    return f"{rng.randint(lo, hi)}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"


def make_fixture(seed: int = 7, n_people: int = 500) -> KnowledgeGraph:
    rng = random.Random(seed)
    ents: list[Entity] = []
    facts: list[Fact] = []
    used: set[str] = set()
    labels: dict[str, str] = {}
    counter = iter(range(100, 100000))

    def new(label: str, types=(), aliases=(), flags=()) -> str:
        eid = f"Q{next(counter)}"
        ents.append(Entity(eid, label, tuple(types), tuple(aliases), tuple(flags)))
        labels[eid] = label
        used.add(label)
        return eid

    def fresh(make) -> str:
        for _ in range(1000):
            label = make()
            if label not in used:
                return label
        raise RuntimeError("label space exhausted")

    def rel(s, p, o, quals=()):
        facts.append(Fact(s, p, RELATIONS[p][0], o, tuple(quals)))

    def lit(s, p, kind, value):
        facts.append(Fact(s, p, RELATIONS[p][0], Literal(kind, value)))

    surname = lambda: rng.choice(SUR_A) + rng.choice(SUR_B)
    person_name = lambda: f"{rng.choice(FIRST)} {surname()}"

    # classes (lowercase, so never renamed)
    t = {name: new(name) for name in ("human", "country", "university", "company", "award", "novel",
                                      "sports club", "academic discipline", "chemical element", "research institute")}
    # time terms and bookkeeping entities, all filtered out
    year_cls = new("year", flags=("time_term",))
    cat_cls = new("Wikimedia category", flags=("bookkeeping",))
    junk = [new("2019", (year_cls,)), new("Category:Novels", (cat_cls,)), new("Route 66"), new("")]

    countries = [new(c, (t["country"],)) for c in COUNTRIES]
    city_types = {c: new(f"city in {COUNTRIES[i]}") for i, c in enumerate(countries)}
    cities = []
    for _ in range(130):
        c = rng.choice(countries)
        label = fresh(lambda: rng.choice(("", "", "", "Port ", "New ", "Upper ")) + surname())
        cid = new(label, (city_types[c],))
        rel(cid, "P17", c)
        lit(cid, "P1082", "quantity", str(rng.randint(2, 900) * 1000))
        cities.append((cid, c))
    for c in countries:
        capital = next(cid for cid, cc in cities if cc == c) if any(cc == c for _, cc in cities) else None
        if capital:
            rel(c, "P36", capital)
        lit(c, "P571", "timestamp", _date(rng, 1100, 1850))

    concepts = [new(x, (t["academic discipline"],)) for x in CONCEPTS]

    unis, companies, institutes = [], [], []
    for cid, c in cities[:45]:
        uid = new(f"University of {labels[cid]}", (t["university"],))
        rel(uid, "P131", cid)
        rel(uid, "P17", c)
        lit(uid, "P571", "timestamp", _date(rng, 1400, 1960))
        unis.append(uid)
    for _ in range(45):
        cid, c = rng.choice(cities)
        oid = new(fresh(lambda: f"{surname()} {rng.choice(('Works', 'Holdings', 'Press', 'Foundry', 'Trading'))}"),
                  (t["company"],))
        rel(oid, "P131", cid)
        rel(oid, "P17", c)
        lit(oid, "P571", "timestamp", _date(rng, 1800, 2000))
        companies.append(oid)
    for _ in range(20):
        cid, c = rng.choice(cities)
        iid = new(fresh(lambda: f"{surname()} Institute"), (t["research institute"],))
        rel(iid, "P131", cid)
        rel(iid, "P101", rng.choice(concepts))
        institutes.append(iid)
    awards = []
    for _ in range(40):
        aid = new(fresh(lambda: f"{surname()} {rng.choice(('Prize', 'Medal', 'Award'))}"), (t["award"],))
        rel(aid, "P1027", rng.choice(unis + institutes))
        awards.append(aid)

    # name chains: city -> club -> academy (three levels of name dependency)
    clubs = []
    for cid, c in cities[45:85]:
        base = labels[cid]
        club = new(f"{base} {rng.choice(('Rovers', 'Athletic', 'Wanderers', 'United'))}", (t["sports club"],))
        rel(club, "P131", cid)
        lit(club, "P571", "timestamp", _date(rng, 1860, 1990))
        clubs.append(club)
        if len(clubs) % 3 == 0:
            club_label = labels[club]
            academy = new(f"{club_label} Academy", (t["research institute"],))
            rel(academy, "P127", club)
            rel(academy, "P131", cid)

    people = []
    for i in range(n_people):
        pid = new(fresh(person_name), (t["human"],))
        people.append(pid)
        cid, c = rng.choice(cities)
        rel(pid, "P19", cid)
        rel(pid, "P27", c)
        lit(pid, "P569", "timestamp", _date(rng, 1880, 1990))
        rel(pid, "P69", rng.choice(unis))
        if rng.random() < 0.7:
            rel(pid, "P108", rng.choice(companies + unis + institutes))
        rel(pid, "P101", rng.choice(concepts))
        for aid in rng.sample(awards, rng.randint(0, 2)):
            rel(pid, "P166", aid, (Qualifier("P585", "point in time", Literal("timestamp", _date(rng, 1920, 2020))),))
        if rng.random() < 0.3:
            rel(pid, "P54", rng.choice(clubs))

    books = []
    for _ in range(90):
        bid = new(fresh(lambda: f"{rng.choice(BOOK_A)} {rng.choice(BOOK_B)}"), (t["novel"],))
        author = rng.choice(people)
        rel(bid, "P50", author)
        rel(author, "P800", bid)
        lit(bid, "P577", "timestamp", _date(rng, 1900, 2020))
        books.append(bid)

    # a place named after a person whose surname is the place name
    for cid, c in cities[85:100]:
        base = labels[cid].split()[-1]
        founder = new(fresh(lambda: f"{rng.choice(FIRST)} {base}"), (t["human"],))
        rel(cid, "P138", founder)
        rel(founder, "P27", c)
        lit(founder, "P569", "timestamp", _date(rng, 1700, 1850))
        rel(founder, "P101", rng.choice(concepts))
        people.append(founder)
    # elements named after people: lowercase, so never renamed, but they leak the name
    for pid in people[:4]:
        surname_ = labels[pid].split()[-1].lower()
        el = new(f"{surname_}ium", (t["chemical element"],))
        rel(el, "P138", pid)
        rel(el, "P101", concepts[1])
    # the junk entities are wired in so filtering has something to remove
    rel(people[0], "P166", junk[0])
    rel(books[0], "P131", junk[1])
    rel(people[1], "P19", junk[2])
    rel(people[2], "P101", junk[3])
    defs = {p: d for p, (_, d) in RELATIONS.items()}
    return KnowledgeGraph.build(ents, facts, defs)


FIXTURE_SEEDS = ("Q203", "Q204", "Q205")


def fixture_config() -> dict:
    return json.loads(resources.files("kgworlds").joinpath("data/fixture/config.json").read_text())


def load_fixture() -> KnowledgeGraph:
    return load_kg(Path(str(resources.files("kgworlds").joinpath("data/fixture"))))
