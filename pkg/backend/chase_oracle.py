"""
Chase Oracle
Certain answers by forward materialization: the ABox is chased under the
TBox with labeled nulls for existentials, then the query is matched in memory
"""

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union

import config
from database import ResultSet
from errors import InstanceTooLarge
from ontology import (
    ClassAssertion, DataAssertion, Domain, Exists, ExistsInverse, InverseOf, Named,
    ObjectAssertion, Ontology, Range, SubClassOf, SubPropertyOf,
)
from query_rewriter import ClassAtom, ConjunctiveQuery, Const, Var

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledNull:
    index: int
    depth: int

    def __repr__(self) -> str:
        return f"_:n{self.index}"


Value = Union[str, LabeledNull]


@dataclass
class FactBase:
    """Ground facts indexed for matching; terms are names, literals or labeled nulls"""
    classes: Dict[str, Set[Value]] = field(default_factory=lambda: defaultdict(set))
    by_subject: Dict[str, Dict[Value, Set[Value]]] = field(default_factory=lambda: defaultdict(lambda: defaultdict(set)))
    by_object: Dict[str, Dict[Value, Set[Value]]] = field(default_factory=lambda: defaultdict(lambda: defaultdict(set)))

    def add_type(self, term: Value, cls: str) -> bool:
        members = self.classes[cls]
        if term in members:
            return False
        members.add(term)
        return True

    def add_edge(self, prop: str, s: Value, o: Value) -> bool:
        targets = self.by_subject[prop][s]
        if o in targets:
            return False
        targets.add(o)
        self.by_object[prop][o].add(s)
        return True

    def pairs(self, prop: str) -> List[Tuple[Value, Value]]:
        return [(s, o) for s, targets in self.by_subject.get(prop, {}).items() for o in targets]

    def size(self) -> int:
        return (sum(len(m) for m in self.classes.values())
                + sum(len(t) for index in self.by_subject.values() for t in index.values()))

    @classmethod
    def from_abox(cls, abox: Iterable) -> 'FactBase':
        facts = cls()
        for assertion in abox:
            if isinstance(assertion, ClassAssertion):
                facts.add_type(assertion.individual, assertion.cls)
            elif isinstance(assertion, ObjectAssertion):
                facts.add_edge(assertion.prop, assertion.subject, assertion.target)
            elif isinstance(assertion, DataAssertion):
                facts.add_edge(assertion.prop, assertion.subject, assertion.value)
        return facts


# ==================== CHASE ====================

def _rules(onto: Ontology):
    role_rules: List[Tuple[str, str, bool]] = []
    concept_rules = []
    for axiom in onto.tbox:
        if isinstance(axiom, SubPropertyOf):
            role_rules.append((axiom.sub, axiom.sup, False))
        elif isinstance(axiom, InverseOf):
            if axiom.prop in onto.object_properties and axiom.inverse in onto.object_properties:
                role_rules.append((axiom.prop, axiom.inverse, True))
                role_rules.append((axiom.inverse, axiom.prop, True))
        elif isinstance(axiom, SubClassOf):
            concept_rules.append((axiom.sub, axiom.sup))
        elif isinstance(axiom, Domain):
            concept_rules.append((Exists(axiom.prop), Named(axiom.cls)))
        elif isinstance(axiom, Range) and axiom.prop in onto.object_properties:
            concept_rules.append((ExistsInverse(axiom.prop), Named(axiom.cls)))
    return role_rules, concept_rules


def _extension(facts: FactBase, expr) -> List[Value]:
    if isinstance(expr, Named):
        return list(facts.classes.get(expr.name, ()))
    if isinstance(expr, Exists):
        return [s for s, targets in facts.by_subject.get(expr.prop, {}).items() if targets]
    return [o for o, sources in facts.by_object.get(expr.prop, {}).items() if sources]


def _satisfied(facts: FactBase, expr, term: Value) -> bool:
    if isinstance(expr, Named):
        return term in facts.classes.get(expr.name, ())
    if isinstance(expr, Exists):
        return bool(facts.by_subject.get(expr.prop, {}).get(term))
    return bool(facts.by_object.get(expr.prop, {}).get(term))


def chase(onto: Ontology, depth_bound: int) -> FactBase:
    """
    Restricted chase of the ABox: role inclusions, concept inclusions and
    Domain/Range typing are applied until fixpoint; an existential is
    witnessed by a fresh null only when no witness exists yet and the null's
    depth stays within depth_bound. ConditionalType and disjointness axioms
    play no part.
    """
    facts = FactBase.from_abox(onto.abox)
    role_rules, concept_rules = _rules(onto)
    counter = itertools.count()

    def depth(term: Value) -> int:
        return term.depth if isinstance(term, LabeledNull) else 0

    changed = True
    while changed:
        changed = False
        for sub, sup, inverse in role_rules:
            for s, o in facts.pairs(sub):
                pair = (o, s) if inverse else (s, o)
                if facts.add_edge(sup, *pair):
                    changed = True

        for lhs, rhs in concept_rules:
            for term in _extension(facts, lhs):
                if _satisfied(facts, rhs, term):
                    continue
                if isinstance(rhs, Named):
                    facts.add_type(term, rhs.name)
                    changed = True
                    continue
                if depth(term) + 1 > depth_bound:
                    continue
                witness = LabeledNull(next(counter), depth(term) + 1)
                if isinstance(rhs, Exists):
                    facts.add_edge(rhs.prop, term, witness)
                else:
                    facts.add_edge(rhs.prop, witness, term)
                changed = True

    return facts


# ==================== MATCHING ====================

def _bound_count(atom, binding: Dict[Var, Value]) -> int:
    return sum(1 for t in atom.terms if isinstance(t, Const) or t in binding)


def _resolve(term, binding: Dict[Var, Value]) -> Optional[Value]:
    if isinstance(term, Const):
        return term.value
    return binding.get(term)


def _candidates(atom, binding: Dict[Var, Value], facts: FactBase):
    if isinstance(atom, ClassAtom):
        value = _resolve(atom.term, binding)
        members = facts.classes.get(atom.cls, set())
        if value is not None:
            return [(value,)] if value in members else []
        return [(m,) for m in members]

    s_val, o_val = _resolve(atom.subject, binding), _resolve(atom.obj, binding)
    if s_val is not None:
        targets = facts.by_subject.get(atom.prop, {}).get(s_val, set())
        if o_val is not None:
            return [(s_val, o_val)] if o_val in targets else []
        return [(s_val, o) for o in targets]
    if o_val is not None:
        return [(s, o_val) for s in facts.by_object.get(atom.prop, {}).get(o_val, set())]
    return facts.pairs(atom.prop)


def evaluate_cq(q: ConjunctiveQuery, facts: FactBase) -> Set[tuple]:
    """All head tuples of q over facts (nulls included)"""
    answers: Set[tuple] = set()

    def search(remaining: List, binding: Dict[Var, Value]):
        if not remaining:
            answers.add(tuple(_resolve(t, binding) for t in q.head))
            return
        atom = max(remaining, key=lambda a: _bound_count(a, binding))
        rest = [a for a in remaining if a is not atom]
        for values in _candidates(atom, binding, facts):
            extended = dict(binding)
            consistent = True
            for term, value in zip(atom.terms, values):
                if isinstance(term, Var):
                    if extended.setdefault(term, value) != value:
                        consistent = False
                        break
            if consistent:
                search(rest, extended)

    search(list(q.atoms), {})
    return answers


def chase_oracle(q: ConjunctiveQuery, onto: Ontology, max_abox: Optional[int] = None) -> ResultSet:
    """
    Certain answers of q: chase to depth |atoms| + 1, match, drop tuples
    holding labeled nulls.

    Raises:
        InstanceTooLarge: the ABox exceeds max_abox assertions
    """
    limit = config.CHASE_MAX_ABOX if max_abox is None else max_abox
    if len(onto.abox) > limit:
        raise InstanceTooLarge(f"ABox has {len(onto.abox)} assertions, oracle limit is {limit}",
                               {'abox': len(onto.abox), 'limit': limit})
    facts = chase(onto, len(q.atoms) + 1)
    rows = {row for row in evaluate_cq(q, facts) if not any(isinstance(v, LabeledNull) for v in row)}
    logger.debug(f"Chase oracle: {facts.size()} facts, {len(rows)} answers")
    return ResultSet(tuple(t.render() for t in q.head), frozenset(rows))
