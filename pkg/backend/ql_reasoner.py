"""
OWL 2 QL Reasoner
Profile validation, taxonomy closure, ABox saturation and consistency checking
"""

import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, List, Set, Tuple

import networkx as nx

from ontology import (
    ABoxAssertion, Axiom, ClassAssertion, ClassExpr, ConditionalType, DataAssertion,
    DisjointClasses, Domain, Exists, ExistsInverse, InverseOf, Named, ObjectAssertion,
    Ontology, Range, SubClassOf, SubPropertyOf,
)

logger = logging.getLogger(__name__)


# ==================== PROFILE VALIDATION ====================

NON_QL_CONDITIONAL_TYPE = 'NON_QL_CONDITIONAL_TYPE'
INVERSE_OF_DATA_PROPERTY = 'INVERSE_OF_DATA_PROPERTY'
MIXED_PROPERTY_KINDS = 'MIXED_PROPERTY_KINDS'
DATA_PROPERTY_CLASS_RANGE = 'DATA_PROPERTY_CLASS_RANGE'


@dataclass(frozen=True)
class ProfileViolation:
    axiom_index: int
    code: str
    message: str


@dataclass(frozen=True)
class ProfileReport:
    violations: Tuple[ProfileViolation, ...] = ()

    @property
    def conformant(self) -> bool:
        return not self.violations

    def codes(self) -> List[str]:
        return [v.code for v in self.violations]

    def render(self) -> str:
        if self.conformant:
            return 'conformant'
        lines = [f'non-conformant ({len(self.violations)} violations)']
        for v in self.violations:
            lines.append(f'  axiom {v.axiom_index}: {v.code} - {v.message}')
        return '\n'.join(lines)


def validate_ql_profile(onto: Ontology) -> ProfileReport:
    """Report every axiom outside the OWL 2 QL fragment (pure function)"""
    violations = []
    data_props = onto.data_properties

    def flag(index: int, code: str, message: str):
        violations.append(ProfileViolation(index, code, message))

    for index, axiom in enumerate(onto.tbox):
        if isinstance(axiom, ConditionalType):
            flag(index, NON_QL_CONDITIONAL_TYPE,
                 f"{axiom.render()} is a qualified classification rule, evaluated only by saturation")
        elif isinstance(axiom, SubClassOf):
            for expr in (axiom.sub, axiom.sup):
                if isinstance(expr, ExistsInverse) and expr.prop in data_props:
                    flag(index, INVERSE_OF_DATA_PROPERTY,
                         f"data property {expr.prop} has no inverse")
        elif isinstance(axiom, InverseOf):
            if axiom.prop in data_props or axiom.inverse in data_props:
                flag(index, INVERSE_OF_DATA_PROPERTY,
                     f"{axiom.render()} involves a data property")
        elif isinstance(axiom, SubPropertyOf):
            if (axiom.sub in data_props) != (axiom.sup in data_props):
                flag(index, MIXED_PROPERTY_KINDS,
                     f"{axiom.render()} mixes object and data properties")
        elif isinstance(axiom, Range):
            if axiom.prop in data_props:
                flag(index, DATA_PROPERTY_CLASS_RANGE,
                     f"{axiom.render()} gives a data property a class range")

    return ProfileReport(tuple(violations))


# ==================== TAXONOMY CLOSURE ====================

# A role is a property name plus an inverse flag
Role = Tuple[str, bool]


def exists_of(role: Role) -> ClassExpr:
    prop, inverse = role
    return ExistsInverse(prop) if inverse else Exists(prop)


def inverse_role(role: Role) -> Role:
    return (role[0], not role[1])


@dataclass(frozen=True)
class TaxonomyClosure:
    """Reflexive-transitive closure of concept and role inclusions"""
    concept_supers: Dict[ClassExpr, FrozenSet[ClassExpr]]
    role_supers: Dict[Role, FrozenSet[Role]]
    concept_subs: Dict[ClassExpr, FrozenSet[ClassExpr]] = field(default_factory=dict)
    role_subs: Dict[Role, FrozenSet[Role]] = field(default_factory=dict)

    def entails(self, sub: ClassExpr, sup: ClassExpr) -> bool:
        return sup in self.concept_supers.get(sub, frozenset((sub,)))

    def entails_role(self, sub: Role, sup: Role) -> bool:
        return sup in self.role_supers.get(sub, frozenset((sub,)))

    def named_supers(self, expr: ClassExpr) -> Set[str]:
        return {e.name for e in self.concept_supers.get(expr, (expr,)) if isinstance(e, Named)}

    def subsumees(self, expr: ClassExpr) -> FrozenSet[ClassExpr]:
        return self.concept_subs.get(expr, frozenset((expr,)))

    def role_subsumees(self, role: Role) -> FrozenSet[Role]:
        return self.role_subs.get(role, frozenset((role,)))

    def pairs(self) -> Set[Tuple[ClassExpr, ClassExpr]]:
        return {(sub, sup) for sub, sups in self.concept_supers.items() for sup in sups}


def _roles(onto: Ontology) -> List[Role]:
    roles = []
    for prop in sorted(onto.object_properties):
        roles.extend([(prop, False), (prop, True)])
    for prop in sorted(onto.data_properties):
        roles.append((prop, False))
    return roles


def _role_graph(onto: Ontology) -> nx.DiGraph:
    graph = nx.DiGraph()
    graph.add_nodes_from(_roles(onto))

    def add(sub: Role, sup: Role):
        graph.add_edge(sub, sup)
        if sub[0] in onto.object_properties and sup[0] in onto.object_properties:
            graph.add_edge(inverse_role(sub), inverse_role(sup))

    for axiom in onto.tbox:
        if isinstance(axiom, SubPropertyOf):
            add((axiom.sub, False), (axiom.sup, False))
        elif isinstance(axiom, InverseOf):
            if axiom.prop in onto.data_properties or axiom.inverse in onto.data_properties:
                continue
            add((axiom.prop, False), (axiom.inverse, True))
            add((axiom.inverse, True), (axiom.prop, False))
    return graph


def _up_sets(graph: nx.DiGraph) -> Dict:
    closure = nx.transitive_closure(graph, reflexive=None)
    return {node: frozenset(closure.successors(node)) | {node} for node in graph.nodes}


def _down_sets(up: Dict) -> Dict:
    down = defaultdict(set)
    for node, sups in up.items():
        for sup in sups:
            down[sup].add(node)
    return {node: frozenset(subs) for node, subs in down.items()}


def closure(onto: Ontology) -> TaxonomyClosure:
    """
    Reflexive-transitive closure of SubClassOf over basic class expressions
    and of SubPropertyOf over roles, with Domain/Range/InverseOf entailments
    (Domain(p, C) gives Exists(p) ⊑ C, Range(p, C) gives ExistsInv(p) ⊑ C,
    and R ⊑ S gives Exists(R) ⊑ Exists(S)).
    ConditionalType axioms are ignored.
    """
    return _closure_of_tbox(onto.classes, onto.object_properties, onto.data_properties, onto.tbox)


@lru_cache(maxsize=64)
def _closure_of_tbox(classes, object_properties, data_properties, tbox) -> TaxonomyClosure:
    onto = Ontology(classes=classes, object_properties=object_properties,
                    data_properties=data_properties, tbox=tbox)
    role_up = _up_sets(_role_graph(onto))

    concepts = nx.DiGraph()
    concepts.add_nodes_from(Named(c) for c in sorted(onto.classes))
    for role in _roles(onto):
        concepts.add_node(exists_of(role))

    for axiom in onto.tbox:
        if isinstance(axiom, SubClassOf):
            concepts.add_edge(axiom.sub, axiom.sup)
        elif isinstance(axiom, Domain):
            concepts.add_edge(Exists(axiom.prop), Named(axiom.cls))
        elif isinstance(axiom, Range) and axiom.prop in onto.object_properties:
            concepts.add_edge(ExistsInverse(axiom.prop), Named(axiom.cls))

    for role, sups in role_up.items():
        for sup in sups:
            if sup != role:
                concepts.add_edge(exists_of(role), exists_of(sup))

    concept_up = _up_sets(concepts)
    return TaxonomyClosure(
        concept_supers=concept_up,
        role_supers=role_up,
        concept_subs=_down_sets(concept_up),
        role_subs=_down_sets(role_up),
    )


def materialize_closure(onto: Ontology) -> Ontology:
    """Add every entailed inclusion expressible in the syntax as an explicit axiom"""
    tax = closure(onto)
    existing = set(onto.tbox)
    added: List[Axiom] = []

    for sub, sup in sorted(tax.pairs(), key=lambda p: (p[0].render(), p[1].render())):
        if sub == sup:
            continue
        if isinstance(sub, ExistsInverse) and sub.prop in onto.data_properties:
            continue
        axiom = SubClassOf(sub, sup)
        if axiom not in existing:
            added.append(axiom)
            existing.add(axiom)

    for sub, sups in sorted(tax.role_supers.items()):
        for sup in sorted(sups):
            if sub == sup or sub[1] != sup[1]:
                continue
            axiom = SubPropertyOf(sub[0], sup[0])
            if axiom not in existing:
                added.append(axiom)
                existing.add(axiom)

    return replace(onto, tbox=onto.tbox + tuple(added))


# ==================== SATURATION ====================

@dataclass
class _Facts:
    """Mutable working set of ground facts over named individuals"""
    types: Dict[str, Set[str]] = field(default_factory=lambda: defaultdict(set))
    edges: Set[Tuple[str, str, str]] = field(default_factory=set)
    values: Set[Tuple[str, str, str]] = field(default_factory=set)


def _role_edges(role: Role, edges: Iterable[Tuple[str, str, str]]):
    prop, inverse = role
    for s, p, o in edges:
        if p == prop:
            yield (o, s) if inverse else (s, o)


def _saturated_facts(onto: Ontology, tax: TaxonomyClosure) -> _Facts:
    facts = _Facts()
    object_props = onto.object_properties

    for assertion in onto.abox:
        if isinstance(assertion, ClassAssertion):
            facts.types[assertion.individual].add(assertion.cls)
        elif isinstance(assertion, ObjectAssertion):
            facts.edges.add((assertion.subject, assertion.prop, assertion.target))
        else:
            facts.values.add((assertion.subject, assertion.prop, assertion.value))

    # Role hierarchy (edges never depend on class membership)
    derived_edges = set(facts.edges)
    for s, p, o in facts.edges:
        for sup_prop, inverse in tax.role_supers.get((p, False), ()):
            derived_edges.add((o, sup_prop, s) if inverse else (s, sup_prop, o))
    facts.edges = derived_edges

    derived_values = set(facts.values)
    for s, p, v in facts.values:
        for sup_prop, _ in tax.role_supers.get((p, False), ()):
            derived_values.add((s, sup_prop, v))
    facts.values = derived_values

    # Basic concepts each individual belongs to
    basic: Dict[str, Set[ClassExpr]] = defaultdict(set)
    for individual, classes in facts.types.items():
        basic[individual].update(Named(c) for c in classes)
    for s, p, o in facts.edges:
        basic[s].add(Exists(p))
        if p in object_props:
            basic[o].add(ExistsInverse(p))
    for s, p, _ in facts.values:
        basic[s].add(Exists(p))

    for individual, exprs in basic.items():
        for expr in exprs:
            facts.types[individual].update(tax.named_supers(expr))

    conditionals = [ax for ax in onto.tbox if isinstance(ax, ConditionalType)]
    if conditionals:
        _fire_conditional_types(conditionals, facts, tax)
    return facts


def _fire_conditional_types(rules: List[ConditionalType], facts: _Facts, tax: TaxonomyClosure):
    """Apply ConditionalType rules until no individual gains a class"""
    incoming: Dict[str, Set[str]] = defaultdict(set)
    for s, _, o in facts.edges:
        incoming[o].add(s)

    def reaching(target: str) -> Set[str]:
        found = {target}
        queue = deque([target])
        while queue:
            node = queue.popleft()
            for source in incoming.get(node, ()):
                if source not in found:
                    found.add(source)
                    queue.append(source)
        return found

    changed = True
    while changed:
        changed = False
        for rule in rules:
            head_parents = tax.named_supers(Named(rule.head_class)) - {rule.head_class}
            for s, p, v in facts.values:
                if p != rule.prop or v != rule.value or rule.body_class not in facts.types.get(s, ()):
                    continue
                for individual in reaching(s):
                    classes = facts.types[individual]
                    if rule.head_class in classes or not (classes & head_parents):
                        continue
                    classes.update(tax.named_supers(Named(rule.head_class)))
                    changed = True


def saturate_abox(onto: Ontology) -> Ontology:
    """
    Extend the ABox to its least fixpoint under subclass/subproperty
    propagation, domain/range typing, inverse completion and ConditionalType
    firing. No fresh individuals are introduced; the operation is idempotent.
    """
    if not onto.abox:
        return onto
    tax = closure(onto)
    facts = _saturated_facts(onto, tax)

    existing = set(onto.abox)
    added: List[ABoxAssertion] = []
    for individual in sorted(facts.types):
        for cls in sorted(facts.types[individual]):
            assertion = ClassAssertion(individual, cls)
            if assertion not in existing:
                added.append(assertion)
    for s, p, o in sorted(facts.edges):
        assertion = ObjectAssertion(s, p, o)
        if assertion not in existing:
            added.append(assertion)
    for s, p, v in sorted(facts.values):
        assertion = DataAssertion(s, p, v)
        if assertion not in existing:
            added.append(assertion)

    logger.debug(f"Saturation added {len(added)} assertions to {len(onto.abox)}")
    return replace(onto, abox=onto.abox + tuple(added))


def classes_of(onto: Ontology) -> Dict[str, Set[str]]:
    """Individual -> entailed named classes"""
    if not onto.abox:
        return {}
    facts = _saturated_facts(onto, closure(onto))
    return {ind: set(classes) for ind, classes in facts.types.items()}


def instances_of(onto: Ontology, cls: str) -> Set[str]:
    return {ind for ind, classes in classes_of(onto).items() if cls in classes}


def disjointness_violations(onto: Ontology) -> List[Tuple[str, str, str]]:
    """(individual, class, class) triples violating a DisjointClasses axiom"""
    disjoint = [ax for ax in onto.tbox if isinstance(ax, DisjointClasses)]
    if not disjoint:
        return []
    types = classes_of(onto)
    violations = []
    for axiom in disjoint:
        for individual in sorted(types):
            classes = types[individual]
            if axiom.first in classes and axiom.second in classes:
                violations.append((individual, axiom.first, axiom.second))
    return violations


def check_consistency(onto: Ontology) -> bool:
    """False iff some DisjointClasses pair shares an instance after saturation"""
    return not disjointness_violations(onto)
