"""Brute-force reachability oracle for relation checks.

Derives the complete set of (object, relation, subject) facts by fixpoint
iteration over three rules, independently of the goal-directed check
engine it is used to verify:

  1. direct tuple with a plain subject
  2. userset tuple (o, r, S#r2) combined with an existing fact (S, r2, s)
  3. relation implication per the built-in schema (owner -> maintainer ->
     participant on agents)
"""

from __future__ import annotations

from agynlite.authz import SCHEMA, RelationTuple, resolve_relation


def all_facts(tuples: list[RelationTuple]) -> set[tuple[str, str, str]]:
    facts: set[tuple[str, str, str]] = set()
    for t in tuples:
        if "#" not in t.subject:
            facts.add((t.object, t.relation, t.subject))
    changed = True
    while changed:
        changed = False
        for t in tuples:
            if "#" in t.subject:
                src_obj, _, src_rel = t.subject.partition("#")
                for (o, r, s) in list(facts):
                    if o == src_obj and r == src_rel:
                        fact = (t.object, t.relation, s)
                        if fact not in facts:
                            facts.add(fact)
                            changed = True
        for (o, r, s) in list(facts):
            typ = o.partition(":")[0]
            for rel, implied_by in SCHEMA[typ]["relations"].items():
                if r in implied_by:
                    fact = (o, rel, s)
                    if fact not in facts:
                        facts.add(fact)
                        changed = True
    return facts


def oracle_check(tuples: list[RelationTuple], obj: str, name: str, subject: str) -> bool:
    relation = resolve_relation(obj.partition(":")[0], name)
    return (obj, relation, subject) in all_facts(tuples)
