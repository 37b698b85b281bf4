"""Tests for CQ parsing, perfect rewriting, SQL compilation and certain answers"""

import random
from dataclasses import replace

import pytest

from chase_oracle import chase_oracle
from database import SQL_DIALECT, check_dialect, generate_schema, open_store
from errors import InstanceTooLarge, NonQLAxiomEncountered, QuerySyntaxError, UnboundHeadVariable, UndeclaredName, UnmappedSymbol
from ontology import (
    ClassAssertion, Domain, Exists, ExistsInverse, InverseOf, Named, ObjectAssertion,
    Ontology, Range, SubClassOf, SubPropertyOf, parse_ontology,
)
from query_rewriter import (
    ClassAtom, ConjunctiveQuery, PropertyAtom, Var, canonicalize, certain_answers,
    compile_to_sql, parse_cq, perfect_rewrite,
)


# ==================== PARSING ====================

def test_parse_cq(ils_onto):
    q = parse_cq("SELECT ?e ?t WHERE { ?e a UnloadEvent . ?e hasTimestamp ?t }", ils_onto)
    assert q.head == (Var('e'), Var('t'))
    assert q.atoms == (ClassAtom('UnloadEvent', Var('e')), PropertyAtom('hasTimestamp', Var('e'), Var('t')))


def test_parse_cq_trailing_dot(tiny_onto):
    q = parse_cq("select ?x where { ?x a Fault . }", tiny_onto)
    assert len(q.atoms) == 1


def test_parse_cq_errors(tiny_onto, ils_onto):
    with pytest.raises(QuerySyntaxError):
        parse_cq("SELECT WHERE { ?x a Fault }", tiny_onto)
    with pytest.raises(QuerySyntaxError):
        parse_cq("SELECT ?x WHERE { ?x a Fault", tiny_onto)
    with pytest.raises(UnboundHeadVariable):
        parse_cq("SELECT ?x ?z WHERE { ?x a Fault }", tiny_onto)
    with pytest.raises(UndeclaredName):
        parse_cq("SELECT ?x WHERE { ?x a Alarm }", tiny_onto)
    with pytest.raises(QuerySyntaxError):
        parse_cq('SELECT ?x WHERE { ?x concerns "literal" }', ils_onto)


# ==================== REWRITING ====================

def test_tiny_rewriting_and_answers(tiny_onto):
    q = parse_cq("SELECT ?x WHERE { ?x a Fault }", tiny_onto)
    ucq = perfect_rewrite(q, tiny_onto)
    assert {d.atoms[0].cls for d in ucq.disjuncts} == {'Fault', 'PriorityFault'}
    assert len(ucq) == 2

    _, mapping = generate_schema(tiny_onto)
    sql = compile_to_sql(ucq, mapping)
    assert sql.dialect == SQL_DIALECT
    assert sql.text.count(' UNION ') == 1
    check_dialect(sql)

    store = open_store(tiny_onto)
    try:
        assert certain_answers(q, tiny_onto, store).sorted_rows() == [('f1',), ('f2',)]
    finally:
        store.close()


def test_empty_tbox_rewrites_to_itself():
    onto = parse_ontology("Class(A)\nObjectProperty(p)\n")
    q = ConjunctiveQuery((Var('x'),), (PropertyAtom('p', Var('x'), Var('y')), ClassAtom('A', Var('y'))))
    ucq = perfect_rewrite(q, onto)
    assert ucq.disjuncts == (canonicalize(q),)


def test_existential_axiom_is_unfolded(ils_onto):
    q = parse_cq("SELECT ?o WHERE { ?o concerns ?i }", ils_onto)
    ucq = perfect_rewrite(q, ils_onto)
    shapes = {tuple(a.predicate for a in d.atoms) for d in ucq.disjuncts}
    assert (('property', 'concerns'),) in shapes
    assert (('class', 'TransportOrder'),) in shapes


def test_rewriting_is_deterministic(ils_onto):
    q = parse_cq("SELECT ?e WHERE { ?e a Event . ?e involves ?i }", ils_onto)
    assert perfect_rewrite(q, ils_onto) == perfect_rewrite(q, ils_onto)


def test_non_ql_tbox_is_refused(e414_onto):
    q = parse_cq("SELECT ?s WHERE { ?s a Symptom }", e414_onto)
    with pytest.raises(NonQLAxiomEncountered):
        perfect_rewrite(q, e414_onto)


def test_unmapped_symbol(tiny_onto):
    q = parse_cq("SELECT ?x WHERE { ?x a Fault }", tiny_onto)
    ucq = perfect_rewrite(q, tiny_onto)
    _, mapping = generate_schema(parse_ontology("Class(Other)\n"))
    with pytest.raises(UnmappedSymbol):
        compile_to_sql(ucq, mapping)


def test_sample_data_answers(fixtures_dir):
    text = (fixtures_dir / 'ils.onto').read_text(encoding='utf-8')
    data = (fixtures_dir / 'ils_sample.data').read_text(encoding='utf-8')
    onto = parse_ontology(text + '\n' + data)
    store = open_store(onto)
    try:
        events = certain_answers(parse_cq("SELECT ?e WHERE { ?e a Event }", onto), onto, store)
        itus = certain_answers(parse_cq("SELECT ?i WHERE { ?i a ITU }", onto), onto, store)
    finally:
        store.close()
    assert events.sorted_rows() == [('ev_1',), ('ev_2',), ('ev_3',)]
    assert itus.sorted_rows() == [('itu_a',), ('itu_b',)]


# ==================== AGREEMENT WITH THE CHASE ====================

def random_tbox(rnd: random.Random, classes, props):
    def basic():
        roll = rnd.random()
        if roll < 0.5:
            return Named(rnd.choice(classes))
        return Exists(rnd.choice(props)) if roll < 0.75 else ExistsInverse(rnd.choice(props))

    makers = (
        lambda: SubClassOf(Named(rnd.choice(classes)), Named(rnd.choice(classes))),
        lambda: SubClassOf(basic(), Named(rnd.choice(classes))),
        lambda: SubClassOf(basic(), rnd.choice([Exists, ExistsInverse])(rnd.choice(props))),
        lambda: SubPropertyOf(rnd.choice(props), rnd.choice(props)),
        lambda: InverseOf(rnd.choice(props), rnd.choice(props)),
        lambda: Domain(rnd.choice(props), rnd.choice(classes)),
        lambda: Range(rnd.choice(props), rnd.choice(classes)),
    )
    return tuple(dict.fromkeys(rnd.choice(makers)() for _ in range(rnd.randint(0, 25))))


def random_instance(seed: int) -> Ontology:
    rnd = random.Random(seed)
    classes = tuple(f"C{k}" for k in range(rnd.randint(1, 15)))
    props = tuple(f"p{k}" for k in range(rnd.randint(1, 8)))
    individuals = tuple(f"i{k}" for k in range(rnd.randint(1, 200)))
    abox = []
    for _ in range(rnd.randint(0, len(individuals) * 3 // 2 + 1)):
        if rnd.random() < 0.5:
            abox.append(ClassAssertion(rnd.choice(individuals), rnd.choice(classes)))
        else:
            abox.append(ObjectAssertion(rnd.choice(individuals), rnd.choice(props), rnd.choice(individuals)))
    return Ontology(
        classes=frozenset(classes),
        object_properties=frozenset(props),
        individuals=frozenset(individuals),
        tbox=random_tbox(rnd, classes, props),
        abox=tuple(dict.fromkeys(abox)),
    )


def random_query(rnd: random.Random, onto: Ontology) -> ConjunctiveQuery:
    """Connected CQ of 1 to 4 atoms with 1 to 3 distinct head variables"""
    classes, props = sorted(onto.classes), sorted(onto.object_properties)
    used = [Var('v0')]
    atoms = []
    for _ in range(rnd.randint(1, 4)):
        anchor = rnd.choice(used)
        if rnd.random() < 0.4:
            atoms.append(ClassAtom(rnd.choice(classes), anchor))
            continue
        other = rnd.choice(used) if rnd.random() < 0.25 else Var(f"v{len(used)}")
        if other not in used:
            used.append(other)
        pair = (anchor, other) if rnd.random() < 0.5 else (other, anchor)
        atoms.append(PropertyAtom(rnd.choice(props), *pair))
    bound = [v for v in used if any(v in a.terms for a in atoms)]
    head = tuple(rnd.sample(bound, rnd.randint(1, min(3, len(bound)))))
    return ConjunctiveQuery(head, tuple(atoms))


def rewritten_answers(q: ConjunctiveQuery, onto: Ontology):
    store = open_store(onto)
    try:
        return certain_answers(q, onto, store)
    finally:
        store.close()


@pytest.mark.parametrize('seed', range(150))
def test_certain_answers_match_chase(seed):
    onto = random_instance(seed)
    q = random_query(random.Random(10_000 + seed), onto)
    expected = chase_oracle(q, onto)
    assert rewritten_answers(q, onto).rows == expected.rows, \
        f"{q.render()} over {[ax.render() for ax in onto.tbox]}"


@pytest.mark.parametrize('seed', range(30))
def test_certain_answers_are_monotone(seed):
    onto = random_instance(20_000 + seed)
    q = random_query(random.Random(30_000 + seed), onto)
    prefix = replace(onto, abox=onto.abox[:len(onto.abox) // 2])
    assert rewritten_answers(q, prefix).rows <= rewritten_answers(q, onto).rows
    assert chase_oracle(q, prefix).rows <= chase_oracle(q, onto).rows


EXISTENTIAL = Ontology(
    classes=frozenset({'C'}),
    object_properties=frozenset({'p'}),
    individuals=frozenset({'a'}),
    tbox=(SubClassOf(Named('C'), Exists('p')),),
    abox=(ClassAssertion('a', 'C'),),
)


def test_chase_witnesses_existential():
    x, y = Var('x'), Var('y')
    q = ConjunctiveQuery((x,), (PropertyAtom('p', x, y),))
    assert chase_oracle(q, EXISTENTIAL).rows == {('a',)}
    assert rewritten_answers(q, EXISTENTIAL).rows == {('a',)}


def test_null_in_head_is_not_an_answer():
    x, y = Var('x'), Var('y')
    q = ConjunctiveQuery((y,), (PropertyAtom('p', x, y),))
    assert chase_oracle(q, EXISTENTIAL).rows == frozenset()
    assert rewritten_answers(q, EXISTENTIAL).rows == frozenset()


def test_chase_refuses_large_instances():
    q = ConjunctiveQuery((Var('x'),), (ClassAtom('C', Var('x')),))
    bigger = EXISTENTIAL.extend([ClassAssertion('b', 'C')])
    with pytest.raises(InstanceTooLarge) as excinfo:
        chase_oracle(q, bigger, max_abox=1)
    assert excinfo.value.details == {'abox': 2, 'limit': 1}
    assert chase_oracle(q, bigger, max_abox=2).rows == {('a',), ('b',)}
