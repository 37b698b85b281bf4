"""
Ontology Model
TBox/ABox types, the line-oriented functional syntax parser and its printer
"""

import logging
import re
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Tuple, Union

from errors import DuplicateDeclaration, OntologySyntaxError, UndeclaredName

logger = logging.getLogger(__name__)


# ==================== CLASS EXPRESSIONS ====================

@dataclass(frozen=True, order=True)
class Named:
    """Atomic class"""
    name: str

    def render(self) -> str:
        return self.name


@dataclass(frozen=True, order=True)
class Exists:
    """Unqualified existential on a property (domain side)"""
    prop: str

    def render(self) -> str:
        return f"Exists({self.prop})"


@dataclass(frozen=True, order=True)
class ExistsInverse:
    """Unqualified existential on the inverse of a property (range side)"""
    prop: str

    def render(self) -> str:
        return f"ExistsInv({self.prop})"


ClassExpr = Union[Named, Exists, ExistsInverse]


# ==================== TBOX AXIOMS ====================

@dataclass(frozen=True)
class SubClassOf:
    sub: ClassExpr
    sup: ClassExpr

    def render(self) -> str:
        return f"SubClassOf({self.sub.render()} {self.sup.render()})"


@dataclass(frozen=True)
class SubPropertyOf:
    sub: str
    sup: str

    def render(self) -> str:
        return f"SubPropertyOf({self.sub} {self.sup})"


@dataclass(frozen=True)
class Domain:
    prop: str
    cls: str

    def render(self) -> str:
        return f"Domain({self.prop} {self.cls})"


@dataclass(frozen=True)
class Range:
    prop: str
    cls: str

    def render(self) -> str:
        return f"Range({self.prop} {self.cls})"


@dataclass(frozen=True)
class InverseOf:
    prop: str
    inverse: str

    def render(self) -> str:
        return f"InverseOf({self.prop} {self.inverse})"


@dataclass(frozen=True)
class DisjointClasses:
    first: str
    second: str

    def render(self) -> str:
        return f"DisjointClasses({self.first} {self.second})"


@dataclass(frozen=True)
class ConditionalType:
    """
    Rule extension outside OWL 2 QL: individuals of body_class carrying
    prop = value refine the generically typed individuals that reach them
    into head_class. Only saturation consumes it.
    """
    body_class: str
    prop: str
    value: str
    head_class: str

    def render(self) -> str:
        return f"ConditionalType({self.body_class} {self.prop} {quote(self.value)} {self.head_class})"


Axiom = Union[SubClassOf, SubPropertyOf, Domain, Range, InverseOf, DisjointClasses, ConditionalType]


# ==================== ABOX ASSERTIONS ====================

@dataclass(frozen=True, order=True)
class ClassAssertion:
    individual: str
    cls: str

    def render(self) -> str:
        return f"ClassAssertion({self.individual} {self.cls})"


@dataclass(frozen=True, order=True)
class ObjectAssertion:
    subject: str
    prop: str
    target: str

    def render(self) -> str:
        return f"ObjectAssertion({self.subject} {self.prop} {self.target})"


@dataclass(frozen=True, order=True)
class DataAssertion:
    subject: str
    prop: str
    value: str

    def render(self) -> str:
        return f"DataAssertion({self.subject} {self.prop} {quote(self.value)})"


ABoxAssertion = Union[ClassAssertion, ObjectAssertion, DataAssertion]


def quote(value: str) -> str:
    escaped = (value.replace('\\', '\\\\').replace('"', '\\"')
               .replace('\n', '\\n').replace('\r', '\\r'))
    return f'"{escaped}"'


# ==================== ONTOLOGY ====================

@dataclass(frozen=True)
class Ontology:
    """Immutable ontology: vocabulary, TBox and ABox"""
    classes: FrozenSet[str] = frozenset()
    object_properties: FrozenSet[str] = frozenset()
    data_properties: FrozenSet[str] = frozenset()
    individuals: FrozenSet[str] = frozenset()
    tbox: Tuple[Axiom, ...] = ()
    abox: Tuple[ABoxAssertion, ...] = ()

    @property
    def properties(self) -> FrozenSet[str]:
        return self.object_properties | self.data_properties

    def kind_of(self, name: str) -> Optional[str]:
        if name in self.classes:
            return 'class'
        if name in self.object_properties:
            return 'object_property'
        if name in self.data_properties:
            return 'data_property'
        if name in self.individuals:
            return 'individual'
        return None

    def has_conditional_types(self) -> bool:
        return any(isinstance(ax, ConditionalType) for ax in self.tbox)

    def without_conditional_types(self) -> 'Ontology':
        return replace(self, tbox=tuple(ax for ax in self.tbox if not isinstance(ax, ConditionalType)))

    def with_abox(self, abox: Iterable[ABoxAssertion]) -> 'Ontology':
        """Replace the ABox, declaring any new individuals"""
        return replace(self, abox=()).extend(abox)

    def extend(self, assertions: Iterable[ABoxAssertion]) -> 'Ontology':
        """
        Append ABox assertions, auto-declaring unseen individuals.
        Classes and properties must already be declared.
        """
        assertions = tuple(assertions)
        individuals = set(self.individuals)
        vocabulary = self.classes | self.properties
        for assertion in assertions:
            for name in _individual_names(assertion):
                if name in vocabulary:
                    raise DuplicateDeclaration(name)
                individuals.add(name)
            _check_assertion_vocabulary(assertion, self)
        return replace(self, individuals=frozenset(individuals), abox=self.abox + assertions)

    def class_assertions(self) -> Iterator[ClassAssertion]:
        return (a for a in self.abox if isinstance(a, ClassAssertion))

    def summary(self) -> Dict[str, int]:
        return {
            'classes': len(self.classes),
            'object_properties': len(self.object_properties),
            'data_properties': len(self.data_properties),
            'individuals': len(self.individuals),
            'tbox': len(self.tbox),
            'abox': len(self.abox),
        }


def _individual_names(assertion: ABoxAssertion) -> Tuple[str, ...]:
    if isinstance(assertion, ClassAssertion):
        return (assertion.individual,)
    if isinstance(assertion, ObjectAssertion):
        return (assertion.subject, assertion.target)
    return (assertion.subject,)


def _check_assertion_vocabulary(assertion: ABoxAssertion, onto: Ontology):
    if isinstance(assertion, ClassAssertion):
        if assertion.cls not in onto.classes:
            raise UndeclaredName(assertion.cls, 'class')
    elif isinstance(assertion, ObjectAssertion):
        if assertion.prop not in onto.object_properties:
            raise UndeclaredName(assertion.prop, 'object property')
    elif assertion.prop not in onto.data_properties:
        raise UndeclaredName(assertion.prop, 'data property')


# ==================== PARSER ====================

_TOKEN_RE = re.compile(r'''
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_\-.:]*)
  | (?P<lparen>\()
  | (?P<rparen>\))
''', re.VERBOSE)

DECLARATIONS = {
    'Class': 'classes',
    'ObjectProperty': 'object_properties',
    'DataProperty': 'data_properties',
    'Individual': 'individuals',
}

# Statement keyword -> argument shape (i: identifier, x: class expression, s: string)
STATEMENT_SHAPES = {
    'Class': 'i', 'ObjectProperty': 'i', 'DataProperty': 'i', 'Individual': 'i',
    'SubClassOf': 'xx', 'SubPropertyOf': 'ii', 'Domain': 'ii', 'Range': 'ii',
    'InverseOf': 'ii', 'DisjointClasses': 'ii', 'ConditionalType': 'iisi',
    'ClassAssertion': 'ii', 'ObjectAssertion': 'iii', 'DataAssertion': 'iis',
}


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize_line(text: str, line_no: int) -> List[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if not match:
            raise OntologySyntaxError(f"Unexpected character {text[pos]!r}", line_no, pos + 1)
        kind = match.lastgroup
        if kind not in ('ws', 'comment'):
            tokens.append(_Token(kind, match.group(), line_no, pos + 1))
        pos = match.end()
    return tokens


_ESCAPES = {'n': '\n', 'r': '\r'}


def _unquote(token: _Token) -> str:
    body = token.text[1:-1]
    return re.sub(r'\\(.)', lambda m: _ESCAPES.get(m.group(1), m.group(1)), body)


@dataclass
class _Statement:
    keyword: str
    args: List[object]
    line: int
    col: int


class _LineParser:
    """Recursive-descent parser for the statements on one line"""

    def __init__(self, tokens: List[_Token], line_no: int, line_len: int):
        self.tokens = tokens
        self.pos = 0
        self.line_no = line_no
        self.line_len = line_len

    def _peek(self) -> Optional[_Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _expect(self, kind: str, what: str) -> _Token:
        token = self._peek()
        if token is None:
            raise OntologySyntaxError(f"Expected {what}, found end of line", self.line_no, self.line_len + 1)
        if token.kind != kind:
            raise OntologySyntaxError(f"Expected {what}, found {token.text!r}", token.line, token.col)
        self.pos += 1
        return token

    def parse_all(self) -> List[_Statement]:
        statements = [self.parse()]
        while self._peek() is not None:
            statements.append(self.parse())
        return statements

    def parse(self) -> _Statement:
        head = self._expect('ident', 'statement keyword')
        shape = STATEMENT_SHAPES.get(head.text)
        if shape is None:
            raise OntologySyntaxError(f"Unknown statement {head.text!r}", head.line, head.col)
        self._expect('lparen', "'('")
        args = []
        for slot in shape:
            if slot == 'i':
                args.append(self._expect('ident', 'name').text)
            elif slot == 's':
                args.append(_unquote(self._expect('string', 'quoted literal')))
            else:
                args.append(self._class_expr())
        self._expect('rparen', "')'")
        return _Statement(head.text, args, head.line, head.col)

    def _class_expr(self):
        name = self._expect('ident', 'class expression')
        nxt = self._peek()
        if name.text in ('Exists', 'ExistsInv') and nxt is not None and nxt.kind == 'lparen':
            self.pos += 1
            prop = self._expect('ident', 'property name')
            self._expect('rparen', "')'")
            return ('exists' if name.text == 'Exists' else 'exists_inv', prop.text, name)
        return ('named', name.text, name)


def _parse_statements(text: str) -> List[_Statement]:
    statements = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = _tokenize_line(line, line_no)
        if not tokens:
            continue
        statements.extend(_LineParser(tokens, line_no, len(line)).parse_all())
    return statements


def parse_ontology(text: str) -> Ontology:
    """
    Parse an ontology written in the line-oriented functional syntax.

    Declarations may appear anywhere in the file; names are resolved after
    all declarations are collected.

    Raises:
        OntologySyntaxError: malformed statement (with line/col)
        UndeclaredName: axiom or assertion mentions an undeclared name
        DuplicateDeclaration: a name declared twice (in any namespace)
    """
    statements = _parse_statements(text)

    vocab: Dict[str, set] = {field_name: set() for field_name in DECLARATIONS.values()}
    seen: Dict[str, str] = {}
    for stmt in statements:
        if stmt.keyword in DECLARATIONS:
            name = stmt.args[0]
            if name in seen:
                raise DuplicateDeclaration(name)
            seen[name] = stmt.keyword
            vocab[DECLARATIONS[stmt.keyword]].add(name)

    onto_vocab = Ontology(**{k: frozenset(v) for k, v in vocab.items()})
    resolver = _Resolver(onto_vocab)

    tbox: List[Axiom] = []
    abox: List[ABoxAssertion] = []
    for stmt in statements:
        if stmt.keyword in DECLARATIONS:
            continue
        item = resolver.build(stmt)
        if isinstance(item, (ClassAssertion, ObjectAssertion, DataAssertion)):
            abox.append(item)
        else:
            tbox.append(item)

    onto = replace(onto_vocab, tbox=tuple(tbox), abox=tuple(abox))
    logger.debug(f"Parsed ontology: {onto.summary()}")
    return onto


class _Resolver:
    """Turns parsed statements into axioms, checking every referenced name"""

    def __init__(self, onto: Ontology):
        self.onto = onto

    def _cls(self, name: str) -> str:
        if name not in self.onto.classes:
            raise UndeclaredName(name, 'class')
        return name

    def _prop(self, name: str) -> str:
        if name not in self.onto.properties:
            raise UndeclaredName(name, 'property')
        return name

    def _obj_prop(self, name: str) -> str:
        if name not in self.onto.object_properties:
            raise UndeclaredName(name, 'object property')
        return name

    def _data_prop(self, name: str) -> str:
        if name not in self.onto.data_properties:
            raise UndeclaredName(name, 'data property')
        return name

    def _ind(self, name: str) -> str:
        if name not in self.onto.individuals:
            raise UndeclaredName(name, 'individual')
        return name

    def _expr(self, parsed) -> ClassExpr:
        kind, name, _ = parsed
        if kind == 'named':
            return Named(self._cls(name))
        if kind == 'exists':
            return Exists(self._prop(name))
        return ExistsInverse(self._prop(name))

    def build(self, stmt: _Statement):
        k, a = stmt.keyword, stmt.args
        if k == 'SubClassOf':
            return SubClassOf(self._expr(a[0]), self._expr(a[1]))
        if k == 'SubPropertyOf':
            return SubPropertyOf(self._prop(a[0]), self._prop(a[1]))
        if k == 'Domain':
            return Domain(self._prop(a[0]), self._cls(a[1]))
        if k == 'Range':
            return Range(self._prop(a[0]), self._cls(a[1]))
        if k == 'InverseOf':
            return InverseOf(self._prop(a[0]), self._prop(a[1]))
        if k == 'DisjointClasses':
            return DisjointClasses(self._cls(a[0]), self._cls(a[1]))
        if k == 'ConditionalType':
            return ConditionalType(self._cls(a[0]), self._data_prop(a[1]), a[2], self._cls(a[3]))
        if k == 'ClassAssertion':
            return ClassAssertion(self._ind(a[0]), self._cls(a[1]))
        if k == 'ObjectAssertion':
            return ObjectAssertion(self._ind(a[0]), self._obj_prop(a[1]), self._ind(a[2]))
        if k == 'DataAssertion':
            return DataAssertion(self._ind(a[0]), self._data_prop(a[1]), a[2])
        raise OntologySyntaxError(f"Unknown statement {k!r}", stmt.line, stmt.col)


def load_ontology(path) -> Ontology:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_ontology(f.read())


# ==================== PRINTER ====================

def print_ontology(onto: Ontology) -> str:
    """Canonical text form; parse_ontology(print_ontology(o)) == o"""
    lines = []
    for keyword, field_name in DECLARATIONS.items():
        for name in sorted(getattr(onto, field_name)):
            lines.append(f"{keyword}({name})")
    lines.extend(axiom.render() for axiom in onto.tbox)
    lines.extend(assertion.render() for assertion in onto.abox)
    return '\n'.join(lines) + ('\n' if lines else '')
