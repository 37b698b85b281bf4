"""Tests for QL profile validation, taxonomy closure and ABox saturation"""

import random
from collections import defaultdict
from dataclasses import replace

import pytest

from ontology import (
    ClassAssertion, DataAssertion, Domain, Exists, ExistsInverse, InverseOf, Named, ObjectAssertion,
    Ontology, Range, SubClassOf, SubPropertyOf, parse_ontology,
)
from ql_reasoner import (
    DATA_PROPERTY_CLASS_RANGE, INVERSE_OF_DATA_PROPERTY, MIXED_PROPERTY_KINDS,
    NON_QL_CONDITIONAL_TYPE, check_consistency, classes_of, closure, disjointness_violations,
    instances_of, materialize_closure, saturate_abox, validate_ql_profile,
)


def naive_types(onto):
    """Fixpoint over named facts only, one rule application at a time"""
    types = defaultdict(set)
    edges = set()
    for a in onto.abox:
        if isinstance(a, ClassAssertion):
            types[a.individual].add(a.cls)
        elif isinstance(a, ObjectAssertion):
            edges.add((a.subject, a.prop, a.target))
        else:
            edges.add((a.subject, a.prop, None))

    changed = True
    while changed:
        changed = False
        for ax in onto.tbox:
            new_edges = set()
            if isinstance(ax, SubPropertyOf):
                new_edges = {(s, ax.sup, o) for s, p, o in edges if p == ax.sub}
            elif isinstance(ax, InverseOf):
                new_edges = {(o, ax.inverse, s) for s, p, o in edges if p == ax.prop and o is not None}
                new_edges |= {(o, ax.prop, s) for s, p, o in edges if p == ax.inverse and o is not None}
            if not new_edges <= edges:
                edges |= new_edges
                changed = True

            additions = []
            if isinstance(ax, Domain):
                additions = [(s, ax.cls) for s, p, _ in edges if p == ax.prop]
            elif isinstance(ax, Range):
                additions = [(o, ax.cls) for _, p, o in edges if p == ax.prop and o is not None]
            elif isinstance(ax, SubClassOf) and isinstance(ax.sup, Named):
                if isinstance(ax.sub, Named):
                    additions = [(i, ax.sup.name) for i, cs in list(types.items()) if ax.sub.name in cs]
                elif isinstance(ax.sub, Exists):
                    additions = [(s, ax.sup.name) for s, p, _ in edges if p == ax.sub.prop]
                else:
                    additions = [(o, ax.sup.name) for _, p, o in edges if p == ax.sub.prop and o is not None]
            for individual, cls in additions:
                if cls not in types[individual]:
                    types[individual].add(cls)
                    changed = True
    return {i: cs for i, cs in types.items() if cs}


def ils_with_sample(fixtures_dir):
    text = (fixtures_dir / 'ils.onto').read_text(encoding='utf-8')
    data = (fixtures_dir / 'ils_sample.data').read_text(encoding='utf-8')
    return parse_ontology(text + '\n' + data)


# ==================== PROFILE ====================

def test_fixture_ontologies_are_ql(ils_onto, hvac_onto, tiny_onto):
    for onto in (ils_onto, hvac_onto, tiny_onto):
        report = validate_ql_profile(onto)
        assert report.conformant, report.render()
        assert report.render() == 'conformant'


def test_e414_flags_only_conditional_types(e414_onto):
    report = validate_ql_profile(e414_onto)
    assert not report.conformant
    assert report.codes() == [NON_QL_CONDITIONAL_TYPE] * 6
    assert validate_ql_profile(e414_onto.without_conditional_types()).conformant


@pytest.mark.parametrize('axiom, code', [
    ('Range(d A)', DATA_PROPERTY_CLASS_RANGE),
    ('InverseOf(d p)', INVERSE_OF_DATA_PROPERTY),
    ('SubPropertyOf(d p)', MIXED_PROPERTY_KINDS),
    ('SubClassOf(ExistsInv(d) A)', INVERSE_OF_DATA_PROPERTY),
])
def test_data_property_misuse(axiom, code):
    onto = parse_ontology(f"Class(A)\nObjectProperty(p)\nDataProperty(d)\n{axiom}\n")
    report = validate_ql_profile(onto)
    assert report.codes() == [code]
    assert report.violations[0].axiom_index == 0


# ==================== CLOSURE ====================

def test_closure_is_reflexive_and_transitive(e414_onto):
    tax = closure(e414_onto)
    assert tax.entails(Named('Symptom'), Named('Symptom'))
    assert tax.entails(Named('TractionTotalMissionImpactSymptom'), Named('Symptom'))
    assert not tax.entails(Named('Symptom'), Named('MissionRelatedSymptom'))


def test_domain_range_and_role_inclusions():
    onto = parse_ontology(
        "Class(A)\nClass(B)\nObjectProperty(p)\nObjectProperty(r)\n"
        "Domain(r A)\nRange(r B)\nSubPropertyOf(p r)\n"
    )
    tax = closure(onto)
    assert tax.entails(Exists('r'), Named('A'))
    assert tax.entails(ExistsInverse('r'), Named('B'))
    assert tax.entails(Exists('p'), Named('A'))
    assert tax.entails(ExistsInverse('p'), Named('B'))
    assert tax.entails_role(('p', True), ('r', True))


def test_inverse_of_links_existentials():
    onto = parse_ontology("Class(A)\nObjectProperty(p)\nObjectProperty(q)\nInverseOf(p q)\nDomain(q A)\n")
    tax = closure(onto)
    assert tax.entails(ExistsInverse('p'), Named('A'))


def test_materialize_closure_is_idempotent(ils_onto):
    once = materialize_closure(ils_onto)
    twice = materialize_closure(once)
    assert set(once.tbox) == set(twice.tbox)
    assert SubClassOf(Exists('occursAt'), Named('Event')) in once.tbox


# ==================== SATURATION ====================

def test_saturation_matches_naive_fixpoint(fixtures_dir):
    onto = ils_with_sample(fixtures_dir)
    saturated = {i: cs for i, cs in classes_of(onto).items() if cs}
    assert saturated == naive_types(onto)


def test_saturation_types_sample_data(fixtures_dir):
    onto = ils_with_sample(fixtures_dir)
    assert instances_of(onto, 'Event') == {'ev_1', 'ev_2', 'ev_3'}
    assert instances_of(onto, 'ITU') == {'itu_a', 'itu_b'}
    assert instances_of(onto, 'TransportOrder') == {'ord_a'}


def test_saturation_is_idempotent(tiny_onto):
    once = saturate_abox(tiny_onto)
    assert ClassAssertion('f2', 'Fault') in once.abox
    assert saturate_abox(once).abox == once.abox


def test_conditional_types_refine_reaching_individuals(e414_onto):
    onto = e414_onto.extend([
        ClassAssertion('od', 'TractionObservationData'),
        ClassAssertion('obs', 'TractionHighTemperatureObservation'),
        ObjectAssertion('obs', 'hasObservationData', 'od'),
        ClassAssertion('sym', 'Symptom'),
        ObjectAssertion('sym', 'refersToObservation', 'obs'),
        ClassAssertion('flt', 'Fault'),
        ObjectAssertion('flt', 'hasSymptom', 'sym'),
        DataAssertion('obs', 'isAt', '_80to130'),
    ])
    types = classes_of(onto)
    assert 'TractionPartialMissionImpactSymptom' in types['sym']
    assert 'MissionRelatedSymptom' in types['sym']
    assert 'PriorityFault' in types['flt']
    assert 'PriorityFault' not in types['sym']
    assert 'Symptom' not in types['flt']


def test_disjointness_violation_detected(fixtures_dir):
    onto = ils_with_sample(fixtures_dir)
    assert check_consistency(onto)
    clash = onto.extend([ClassAssertion('T1', 'ITU')])
    assert not check_consistency(clash)
    assert ('T1', 'ITU', 'Terminal') in disjointness_violations(clash)


def naive_memberships(onto):
    """Fixpoint over basic-concept memberships; also covers A ⊑ ∃p chains through anonymous successors"""
    member = defaultdict(set)
    edges = set()
    for a in onto.abox:
        if isinstance(a, ClassAssertion):
            member[a.individual].add(Named(a.cls))
        elif isinstance(a, ObjectAssertion):
            edges.add((a.subject, a.prop, a.target))

    implications = []
    for ax in onto.tbox:
        if isinstance(ax, SubClassOf):
            implications.append((ax.sub, ax.sup))
        elif isinstance(ax, SubPropertyOf):
            implications += [(Exists(ax.sub), Exists(ax.sup)), (ExistsInverse(ax.sub), ExistsInverse(ax.sup))]
        elif isinstance(ax, InverseOf):
            implications += [(Exists(ax.prop), ExistsInverse(ax.inverse)), (ExistsInverse(ax.prop), Exists(ax.inverse)),
                             (Exists(ax.inverse), ExistsInverse(ax.prop)), (ExistsInverse(ax.inverse), Exists(ax.prop))]
        elif isinstance(ax, Domain):
            implications.append((Exists(ax.prop), Named(ax.cls)))
        elif isinstance(ax, Range):
            implications.append((ExistsInverse(ax.prop), Named(ax.cls)))

    changed = True
    while changed:
        changed = False
        new_edges = set()
        for ax in onto.tbox:
            if isinstance(ax, SubPropertyOf):
                new_edges |= {(s, ax.sup, o) for s, p, o in edges if p == ax.sub}
            elif isinstance(ax, InverseOf):
                new_edges |= {(o, ax.inverse, s) for s, p, o in edges if p == ax.prop}
                new_edges |= {(o, ax.prop, s) for s, p, o in edges if p == ax.inverse}
        if not new_edges <= edges:
            edges |= new_edges
            changed = True
        for s, p, o in edges:
            for individual, expr in ((s, Exists(p)), (o, ExistsInverse(p))):
                if expr not in member[individual]:
                    member[individual].add(expr)
                    changed = True
        for individual in list(member):
            for sub, sup in implications:
                if sub in member[individual] and sup not in member[individual]:
                    member[individual].add(sup)
                    changed = True
    named = {i: {e.name for e in es if isinstance(e, Named)} for i, es in member.items()}
    return {i: cs for i, cs in named.items() if cs}


def random_ql_ontology(rng, max_individuals=50):
    classes = [f"C{i}" for i in range(rng.randint(2, 20))]
    props = [f"p{i}" for i in range(rng.randint(1, 6))]
    individuals = [f"i{i}" for i in range(rng.randint(1, max_individuals))]

    def basic():
        roll = rng.random()
        if roll < 0.6:
            return Named(rng.choice(classes))
        return Exists(rng.choice(props)) if roll < 0.8 else ExistsInverse(rng.choice(props))

    makers = [
        lambda: SubClassOf(basic(), basic()),
        lambda: SubClassOf(Named(rng.choice(classes)), Named(rng.choice(classes))),
        lambda: SubPropertyOf(rng.choice(props), rng.choice(props)),
        lambda: InverseOf(rng.choice(props), rng.choice(props)),
        lambda: Domain(rng.choice(props), rng.choice(classes)),
        lambda: Range(rng.choice(props), rng.choice(classes)),
    ]
    tbox = tuple(rng.choice(makers)() for _ in range(rng.randint(0, 30)))
    abox = []
    for _ in range(rng.randint(0, 80)):
        if rng.random() < 0.5:
            abox.append(ClassAssertion(rng.choice(individuals), rng.choice(classes)))
        else:
            abox.append(ObjectAssertion(rng.choice(individuals), rng.choice(props), rng.choice(individuals)))
    return Ontology(classes=frozenset(classes), object_properties=frozenset(props),
                    individuals=frozenset(individuals), tbox=tbox, abox=tuple(abox))


def named_types(onto):
    return {i: cs for i, cs in classes_of(onto).items() if cs}


@pytest.mark.parametrize('seed', range(60))
def test_saturation_matches_naive_fixpoint_on_random_ontologies(seed):
    onto = random_ql_ontology(random.Random(seed))
    assert named_types(onto) == naive_memberships(onto)


@pytest.mark.parametrize('seed', range(20))
def test_saturation_is_monotone(seed):
    rng = random.Random(1000 + seed)
    onto = random_ql_ontology(rng)
    half = replace(onto, abox=onto.abox[:len(onto.abox) // 2])
    smaller, larger = named_types(half), named_types(onto)
    for individual, classes in smaller.items():
        assert classes <= larger[individual]
    assert set(saturate_abox(half).abox) <= set(saturate_abox(onto).abox)


@pytest.mark.parametrize('severity, symptom_class, fault_class, mission', [
    ('_130degrees', 'TractionTotalMissionImpactSymptom', 'PriorityFault', True),
    ('_80to130', 'TractionPartialMissionImpactSymptom', 'PriorityFault', True),
    ('_70to80', 'TractionMaintenanceImpactSymptom', 'NonPriorityFault', False),
])
def test_every_severity_range_refines(e414_onto, severity, symptom_class, fault_class, mission):
    onto = e414_onto.extend([
        ClassAssertion('obs', 'TractionHighTemperatureObservation'),
        ClassAssertion('sym', 'Symptom'),
        ObjectAssertion('sym', 'refersToObservation', 'obs'),
        ClassAssertion('flt', 'Fault'),
        ObjectAssertion('flt', 'hasSymptom', 'sym'),
        DataAssertion('obs', 'isAt', severity),
    ])
    types = classes_of(onto)
    assert symptom_class in types['sym']
    assert ('MissionRelatedSymptom' in types['sym']) is mission
    assert 'MaintenanceRelatedSymptom' in types['sym']
    assert fault_class in types['flt']
    assert check_consistency(onto)
