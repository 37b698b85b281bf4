"""
Query Rewriting Engine
Parses conjunctive queries, rewrites them against an OWL 2 QL TBox into a
union of conjunctive queries and compiles the union into SQL
"""

import itertools
import logging
import re
import time
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from database import SQL_DIALECT, Database, Mapping, ResultSet, SQLText, execute, sql_identifier, sql_literal
from errors import (
    NonQLAxiomEncountered, QuerySyntaxError, UnboundHeadVariable, UndeclaredName,
    UnmappedSymbol,
)
from logging_config import log_performance
from ontology import Exists, ExistsInverse, Named, Ontology
from ql_reasoner import TaxonomyClosure, closure, validate_ql_profile

logger = logging.getLogger(__name__)


# ==================== QUERY AST ====================

@dataclass(frozen=True)
class Var:
    name: str

    def render(self) -> str:
        return f"?{self.name}"


@dataclass(frozen=True)
class Const:
    value: str

    def render(self) -> str:
        return f'"{self.value}"'


Term = Union[Var, Const]


@dataclass(frozen=True)
class ClassAtom:
    cls: str
    term: Term

    @property
    def terms(self) -> Tuple[Term, ...]:
        return (self.term,)

    @property
    def predicate(self) -> Tuple[str, str]:
        return ('class', self.cls)

    def with_terms(self, terms: Sequence[Term]) -> 'ClassAtom':
        return ClassAtom(self.cls, terms[0])

    def render(self) -> str:
        return f"{self.cls}({self.term.render()})"


@dataclass(frozen=True)
class PropertyAtom:
    prop: str
    subject: Term
    obj: Term

    @property
    def terms(self) -> Tuple[Term, ...]:
        return (self.subject, self.obj)

    @property
    def predicate(self) -> Tuple[str, str]:
        return ('property', self.prop)

    def with_terms(self, terms: Sequence[Term]) -> 'PropertyAtom':
        return PropertyAtom(self.prop, terms[0], terms[1])

    def render(self) -> str:
        return f"{self.prop}({self.subject.render()}, {self.obj.render()})"


Atom = Union[ClassAtom, PropertyAtom]


@dataclass(frozen=True)
class ConjunctiveQuery:
    """q(head) <- atom, atom, ...  (head terms are variables, or constants after reduction)"""
    head: Tuple[Term, ...]
    atoms: Tuple[Atom, ...]

    @property
    def head_vars(self) -> Tuple[Var, ...]:
        return tuple(t for t in self.head if isinstance(t, Var))

    @property
    def arity(self) -> int:
        return len(self.head)

    def variables(self) -> List[Var]:
        seen: List[Var] = []
        for atom in self.atoms:
            for term in atom.terms:
                if isinstance(term, Var) and term not in seen:
                    seen.append(term)
        return seen

    def render(self) -> str:
        head = ', '.join(t.render() for t in self.head)
        body = ', '.join(a.render() for a in self.atoms)
        return f"q({head}) <- {body}"


@dataclass(frozen=True)
class UnionOfCQs:
    disjuncts: Tuple[ConjunctiveQuery, ...]

    def __post_init__(self):
        if not self.disjuncts:
            raise ValueError("A union of conjunctive queries needs at least one disjunct")
        arities = {q.arity for q in self.disjuncts}
        if len(arities) != 1:
            raise ValueError(f"Disjuncts disagree on head arity: {sorted(arities)}")

    @property
    def arity(self) -> int:
        return self.disjuncts[0].arity

    def __len__(self) -> int:
        return len(self.disjuncts)

    def render(self) -> str:
        return '\n'.join(q.render() for q in self.disjuncts)


# ==================== PARSER ====================

_QUERY_TOKEN_RE = re.compile(r'''
    (?P<ws>\s+)
  | (?P<var>\?[A-Za-z0-9_]+)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<lbrace>\{)
  | (?P<rbrace>\})
  | (?P<dot>\.(?![A-Za-z0-9_]))
  | (?P<ident>[A-Za-z_][A-Za-z0-9_\-.:]*)
''', re.VERBOSE)


def _tokenize_query(text: str) -> List[Tuple[str, str, int, int]]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        match = _QUERY_TOKEN_RE.match(text, pos)
        if not match:
            raise QuerySyntaxError(f"Unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = match.lastgroup
        if kind != 'ws':
            tokens.append((kind, match.group(), line, pos - line_start + 1))
        else:
            newlines = match.group().count('\n')
            if newlines:
                line += newlines
                line_start = pos + match.group().rfind('\n') + 1
        pos = match.end()
    return tokens


class _QueryParser:
    def __init__(self, text: str, onto: Ontology):
        self.tokens = _tokenize_query(text)
        self.pos = 0
        self.onto = onto

    def _peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _next(self, what: str):
        token = self._peek()
        if token is None:
            raise QuerySyntaxError(f"Expected {what}, found end of query", 0, 0)
        self.pos += 1
        return token

    def _keyword(self, word: str):
        token = self._next(word)
        if token[0] != 'ident' or token[1].upper() != word:
            raise QuerySyntaxError(f"Expected {word}, found {token[1]!r}", token[2], token[3])

    def _expect(self, kind: str, what: str):
        token = self._next(what)
        if token[0] != kind:
            raise QuerySyntaxError(f"Expected {what}, found {token[1]!r}", token[2], token[3])
        return token

    def parse(self) -> ConjunctiveQuery:
        self._keyword('SELECT')
        head: List[Var] = []
        while self._peek() is not None and self._peek()[0] == 'var':
            head.append(Var(self._next('variable')[1][1:]))
        if not head:
            token = self._peek()
            line, col = (token[2], token[3]) if token else (0, 0)
            raise QuerySyntaxError("SELECT needs at least one variable", line, col)
        self._keyword('WHERE')
        self._expect('lbrace', "'{'")

        atoms: List[Atom] = []
        while True:
            token = self._peek()
            if token is None:
                raise QuerySyntaxError("Unterminated group pattern", 0, 0)
            if token[0] == 'rbrace':
                self.pos += 1
                break
            atoms.append(self._triple())
            token = self._peek()
            if token is not None and token[0] == 'dot':
                self.pos += 1
            elif token is None or token[0] != 'rbrace':
                line, col = (token[2], token[3]) if token else (0, 0)
                raise QuerySyntaxError("Expected '.' or '}' after triple", line, col)

        trailing = self._peek()
        if trailing is not None:
            raise QuerySyntaxError(f"Unexpected {trailing[1]!r} after query", trailing[2], trailing[3])

        body_vars = {t for atom in atoms for t in atom.terms if isinstance(t, Var)}
        for var in head:
            if var not in body_vars:
                raise UnboundHeadVariable(var.name)
        return ConjunctiveQuery(tuple(head), tuple(atoms))

    def _individual_or_var(self, token) -> Term:
        kind, text, line, col = token
        if kind == 'var':
            return Var(text[1:])
        if kind == 'ident':
            if text not in self.onto.individuals:
                raise UndeclaredName(text, 'individual')
            return Const(text)
        raise QuerySyntaxError(f"Expected variable or individual, found {text!r}", line, col)

    def _triple(self) -> Atom:
        subject = self._individual_or_var(self._next('subject'))
        predicate = self._next('predicate')
        if predicate[0] != 'ident':
            raise QuerySyntaxError(f"Expected predicate, found {predicate[1]!r}", predicate[2], predicate[3])

        if predicate[1] == 'a':
            cls = self._expect('ident', 'class name')
            if cls[1] not in self.onto.classes:
                raise UndeclaredName(cls[1], 'class')
            return ClassAtom(cls[1], subject)

        prop = predicate[1]
        if prop not in self.onto.properties:
            raise UndeclaredName(prop, 'property')
        obj_token = self._next('object')
        if obj_token[0] == 'string':
            if prop not in self.onto.data_properties:
                raise QuerySyntaxError(f"Object property {prop} cannot take a literal", obj_token[2], obj_token[3])
            value = re.sub(r'\\(.)', r'\1', obj_token[1][1:-1])
            return PropertyAtom(prop, subject, Const(value))
        if obj_token[0] == 'ident' and prop in self.onto.data_properties:
            raise QuerySyntaxError(f"Data property {prop} takes a literal or variable", obj_token[2], obj_token[3])
        return PropertyAtom(prop, subject, self._individual_or_var(obj_token))


def parse_cq(text: str, onto: Ontology) -> ConjunctiveQuery:
    """
    Parse `SELECT ?v ... WHERE { triple . triple ... }` resolving names
    against the ontology vocabulary.
    """
    return _QueryParser(text, onto).parse()


# ==================== CANONICAL FORM ====================

_MAX_PERMUTED_ATOMS = 6


def _term_key(term: Term) -> Tuple[int, str]:
    return (0, term.name) if isinstance(term, Var) else (1, term.value)


def _atom_key(atom: Atom) -> Tuple:
    return (atom.predicate, tuple(_term_key(t) for t in atom.terms))


def _dedupe(atoms: Iterable[Atom]) -> Tuple[Atom, ...]:
    seen = []
    for atom in atoms:
        if atom not in seen:
            seen.append(atom)
    return tuple(seen)


def _rename(atoms: Sequence[Atom], head: Tuple[Term, ...]) -> Tuple[Atom, ...]:
    renaming: Dict[Var, Var] = {}
    renamed = []
    for atom in atoms:
        terms = []
        for term in atom.terms:
            if isinstance(term, Var) and term not in head:
                if term not in renaming:
                    renaming[term] = Var(f"_:{len(renaming)}")
                term = renaming[term]
            terms.append(term)
        renamed.append(atom.with_terms(terms))
    return tuple(sorted(renamed, key=_atom_key))


def canonicalize(q: ConjunctiveQuery) -> ConjunctiveQuery:
    """Deterministic representative of q up to renaming of non-head variables"""
    atoms = _dedupe(q.atoms)
    if len(atoms) <= _MAX_PERMUTED_ATOMS:
        orders = itertools.permutations(atoms)
    else:
        orders = [sorted(atoms, key=lambda a: a.predicate)]
    best = None
    best_key = None
    for order in orders:
        candidate = _rename(order, q.head)
        key = tuple(_atom_key(a) for a in candidate)
        if best_key is None or key < best_key:
            best, best_key = candidate, key
    return ConjunctiveQuery(q.head, best)


# ==================== REWRITING ====================

class _FreshVars:
    def __init__(self):
        self.counter = itertools.count()

    def __call__(self) -> Var:
        return Var(f"_:f{next(self.counter)}")


def _unbound(q: ConjunctiveQuery) -> set:
    """Non-head variables occurring exactly once"""
    counts: Dict[Var, int] = {}
    for atom in q.atoms:
        for term in atom.terms:
            if isinstance(term, Var):
                counts[term] = counts.get(term, 0) + 1
    return {v for v, n in counts.items() if n == 1 and v not in q.head}


def _atom_for(expr, term: Term, fresh: _FreshVars) -> Atom:
    if isinstance(expr, Named):
        return ClassAtom(expr.name, term)
    if isinstance(expr, Exists):
        return PropertyAtom(expr.prop, term, fresh())
    return PropertyAtom(expr.prop, fresh(), term)


def _render_key(expr) -> str:
    return expr.render()


def _atom_rewritings(atom: Atom, unbound: set, tax: TaxonomyClosure, fresh: _FreshVars) -> List[Atom]:
    """Atoms obtained by applying one entailed inclusion right-to-left"""
    results: List[Atom] = []
    if isinstance(atom, ClassAtom):
        target = Named(atom.cls)
        for expr in sorted(tax.subsumees(target), key=_render_key):
            if expr != target:
                results.append(_atom_for(expr, atom.term, fresh))
        return results

    role = (atom.prop, False)
    for sub_prop, inverse in sorted(tax.role_subsumees(role)):
        if (sub_prop, inverse) == role:
            continue
        if inverse:
            results.append(PropertyAtom(sub_prop, atom.obj, atom.subject))
        else:
            results.append(PropertyAtom(sub_prop, atom.subject, atom.obj))

    if atom.obj in unbound:
        target = Exists(atom.prop)
        for expr in sorted(tax.subsumees(target), key=_render_key):
            if expr != target:
                results.append(_atom_for(expr, atom.subject, fresh))
    if atom.subject in unbound:
        target = ExistsInverse(atom.prop)
        for expr in sorted(tax.subsumees(target), key=_render_key):
            if expr != target:
                results.append(_atom_for(expr, atom.obj, fresh))
    return results


def _mgu(first: Atom, second: Atom, head: Tuple[Term, ...]) -> Optional[Dict[Var, Term]]:
    if first.predicate != second.predicate:
        return None
    subst: Dict[Var, Term] = {}

    def find(term: Term) -> Term:
        while isinstance(term, Var) and term in subst:
            term = subst[term]
        return term

    for x, y in zip(first.terms, second.terms):
        x, y = find(x), find(y)
        if x == y:
            continue
        if isinstance(x, Var) and isinstance(y, Var):
            # keep head variables as representatives
            if x in head and y not in head:
                subst[y] = x
            else:
                subst[x] = y
        elif isinstance(x, Var):
            subst[x] = y
        elif isinstance(y, Var):
            subst[y] = x
        else:
            return None

    return {var: find(var) for var in subst}


def _apply(q: ConjunctiveQuery, subst: Dict[Var, Term]) -> ConjunctiveQuery:
    def sub(term: Term) -> Term:
        return subst.get(term, term) if isinstance(term, Var) else term

    head = tuple(sub(t) for t in q.head)
    atoms = tuple(a.with_terms([sub(t) for t in a.terms]) for a in q.atoms)
    return ConjunctiveQuery(head, _dedupe(atoms))


def _reductions(q: ConjunctiveQuery) -> List[ConjunctiveQuery]:
    results = []
    for i, j in itertools.combinations(range(len(q.atoms)), 2):
        subst = _mgu(q.atoms[i], q.atoms[j], q.head)
        if subst is not None:
            results.append(_apply(q, subst))
    return results


def _homomorphism(source: ConjunctiveQuery, target: ConjunctiveQuery) -> bool:
    """True if source maps into target head-to-head (target is contained in source)"""
    mapping: Dict[Var, Term] = {}
    for s_term, t_term in zip(source.head, target.head):
        if isinstance(s_term, Var):
            if mapping.setdefault(s_term, t_term) != t_term:
                return False
        elif s_term != t_term:
            return False

    by_predicate: Dict[Tuple[str, str], List[Atom]] = {}
    for atom in target.atoms:
        by_predicate.setdefault(atom.predicate, []).append(atom)

    atoms = sorted(source.atoms, key=lambda a: len(by_predicate.get(a.predicate, ())))

    def extend(index: int, current: Dict[Var, Term]) -> bool:
        if index == len(atoms):
            return True
        atom = atoms[index]
        for candidate in by_predicate.get(atom.predicate, ()):
            trial = dict(current)
            ok = True
            for s_term, t_term in zip(atom.terms, candidate.terms):
                if isinstance(s_term, Var):
                    if trial.setdefault(s_term, t_term) != t_term:
                        ok = False
                        break
                elif s_term != t_term:
                    ok = False
                    break
            if ok and extend(index + 1, trial):
                return True
        return False

    return extend(0, mapping)


def _prune_contained(queries: List[ConjunctiveQuery]) -> List[ConjunctiveQuery]:
    kept: List[ConjunctiveQuery] = []
    for candidate in queries:
        if any(_homomorphism(existing, candidate) for existing in kept):
            continue
        kept = [existing for existing in kept if not _homomorphism(candidate, existing)]
        kept.append(candidate)
    return kept


def _normalize(q: ConjunctiveQuery) -> ConjunctiveQuery:
    return canonicalize(ConjunctiveQuery(q.head, _dedupe(q.atoms)))


def perfect_rewrite(q: ConjunctiveQuery, onto: Ontology) -> UnionOfCQs:
    """
    Rewrite q into a UCQ whose evaluation over the raw ABox yields the
    certain answers of q over the ontology.

    Alternates atom rewriting (entailed inclusions applied right-to-left)
    and reduction (unification of atom pairs) until no new query appears,
    then drops disjuncts contained in another disjunct.

    Raises:
        NonQLAxiomEncountered: the TBox holds axioms outside OWL 2 QL
    """
    report = validate_ql_profile(onto)
    if not report.conformant:
        raise NonQLAxiomEncountered(
            "Rewriting needs a QL-conformant TBox; found " + ', '.join(sorted(set(report.codes()))),
            {'violations': [v.axiom_index for v in report.violations]}
        )

    started = time.perf_counter()
    tax = closure(onto)
    fresh = _FreshVars()

    start = _normalize(q)
    seen = {(start.head, start.atoms): start}
    order = [start]
    frontier = [start]
    while frontier:
        current = frontier.pop(0)
        unbound = _unbound(current)
        produced: List[ConjunctiveQuery] = []
        for index, atom in enumerate(current.atoms):
            for replacement in _atom_rewritings(atom, unbound, tax, fresh):
                atoms = current.atoms[:index] + (replacement,) + current.atoms[index + 1:]
                produced.append(ConjunctiveQuery(current.head, _dedupe(atoms)))
        produced.extend(_reductions(current))

        for candidate in produced:
            candidate = canonicalize(candidate)
            key = (candidate.head, candidate.atoms)
            if key not in seen:
                seen[key] = candidate
                order.append(candidate)
                frontier.append(candidate)

    disjuncts = _prune_contained(order)
    log_performance(logger, 'perfect_rewrite', round((time.perf_counter() - started) * 1000, 3),
                    {'explored': len(order), 'disjuncts': len(disjuncts)})
    return UnionOfCQs(tuple(disjuncts))


# ==================== SQL COMPILATION ====================

def _compile_block(q: ConjunctiveQuery, mapping: Mapping) -> str:
    tables: List[str] = []
    conditions: List[str] = []
    first_column: Dict[Var, str] = {}

    for index, atom in enumerate(q.atoms):
        alias = f"t{index}"
        if isinstance(atom, ClassAtom):
            if atom.cls not in mapping.class_map:
                raise UnmappedSymbol(atom.cls)
            table = mapping.class_map[atom.cls]
            columns = [f"{alias}.id"]
        elif atom.prop in mapping.obj_prop_map:
            table, s_col, o_col = mapping.obj_prop_map[atom.prop]
            columns = [f"{alias}.{s_col}", f"{alias}.{o_col}"]
        elif atom.prop in mapping.data_prop_map:
            table, s_col, v_col = mapping.data_prop_map[atom.prop]
            columns = [f"{alias}.{s_col}", f"{alias}.{v_col}"]
        else:
            raise UnmappedSymbol(atom.prop)
        tables.append(f"{sql_identifier(table)} {alias}")

        for term, column in zip(atom.terms, columns):
            if isinstance(term, Const):
                conditions.append(f"{column} = {sql_literal(term.value)}")
            elif term in first_column:
                conditions.append(f"{first_column[term]} = {column}")
            else:
                first_column[term] = column

    select = [first_column[t] if isinstance(t, Var) else sql_literal(t.value) for t in q.head]
    block = f"SELECT DISTINCT {', '.join(select)} FROM {', '.join(tables)}"
    if conditions:
        block += f" WHERE {' AND '.join(conditions)}"
    return block


def compile_to_sql(ucq: UnionOfCQs, mapping: Mapping) -> SQLText:
    """One SELECT DISTINCT block per disjunct, joined by UNION"""
    blocks = [_compile_block(q, mapping) for q in ucq.disjuncts]
    columns = tuple(t.render() for t in ucq.disjuncts[0].head)
    return SQLText(dialect=SQL_DIALECT, text=' UNION '.join(blocks), columns=columns)


def certain_answers(q: ConjunctiveQuery, onto: Ontology, store: Database) -> ResultSet:
    """execute(compile_to_sql(perfect_rewrite(q, o))) over a store populated from o's ABox"""
    ucq = perfect_rewrite(q, onto)
    sql = compile_to_sql(ucq, store.mapping)
    return execute(store, sql)
