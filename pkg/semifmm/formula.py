"""
Model formulas.

Grammar (whitespace-insensitive)::

    formula   := [NAME '~'] rhs
    rhs       := item (('+' | '-') item)*        '-' may only precede '1'
    item      := '0' | '1' | random | product
    product   := atom [':' atom]
    atom      := 'lin' '(' NAME ')' | 'np' '(' NAME [',' 'knots' '=' INT] ')'
               | 'hyper' '(' NAME ')' | NAME
    random    := '(' ['0' '+' | '1' '+'] rhs_atom '|' NAME ')'
               | '(' '1' '|' NAME ')'

Examples::

    value ~ np(age) + hyper(iop) + (hyper(iop) | eye)
    value ~ 0 + lin(age)
    value ~ hyper(iop) + hyper(iop):np(age) + (1 | eye) + (1 | subject)
"""
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

from .errors import FormulaError

_TOKEN = re.compile(r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_.]*)|(?P<op>[()~+\-|:,=]))")
_FUNCTIONS = ("lin", "np", "hyper")
DEFAULT_KNOTS = 5


@dataclass(frozen=True)
class LinearTerm:
    covariate: str

    def label(self) -> str:
        return f"lin({self.covariate})"


@dataclass(frozen=True)
class SerialTerm:
    covariate: str
    kind: str = "hyperbolic"

    def label(self) -> str:
        return f"hyper({self.covariate})"


@dataclass(frozen=True)
class NonparametricTerm:
    covariate: str
    knots: int = DEFAULT_KNOTS

    def label(self) -> str:
        if self.knots == DEFAULT_KNOTS:
            return f"np({self.covariate})"
        return f"np({self.covariate}, knots={self.knots})"


@dataclass(frozen=True)
class InteractionTerm:
    left: Union[LinearTerm, SerialTerm]
    right: NonparametricTerm

    def label(self) -> str:
        return f"{self.left.label()}:{self.right.label()}"


FixedTerm = Union[LinearTerm, SerialTerm, NonparametricTerm, InteractionTerm]


@dataclass(frozen=True)
class RandomLevel:
    grouping: str
    intercept: bool = True
    slope: Optional[Union[LinearTerm, SerialTerm]] = None

    def label(self) -> str:
        if self.slope is None:
            return f"(1 | {self.grouping})"
        lead = "" if self.intercept else "0 + "
        return f"({lead}{self.slope.label()} | {self.grouping})"


@dataclass(frozen=True)
class ModelSpec:
    fixed_terms: Tuple[FixedTerm, ...] = ()
    random_levels: Tuple[RandomLevel, ...] = ()
    include_intercept: bool = True
    response: str = "value"

    @property
    def nonparametric_terms(self) -> List[Union[NonparametricTerm, InteractionTerm]]:
        return [t for t in self.fixed_terms if isinstance(t, (NonparametricTerm, InteractionTerm))]

    def to_formula(self) -> str:
        parts = [] if self.include_intercept else ["0"]
        parts += [t.label() for t in self.fixed_terms]
        parts += [r.label() for r in self.random_levels]
        return f"{self.response} ~ {' + '.join(parts) if parts else '1'}"

    def with_random(self, levels: Tuple[RandomLevel, ...]) -> "ModelSpec":
        return ModelSpec(self.fixed_terms, tuple(levels), self.include_intercept, self.response)


@dataclass
class _Token:
    kind: str
    text: str
    position: int


def _tokenize(text: str) -> List[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        match = _TOKEN.match(text, pos)
        if not match:
            stripped = len(text[pos:]) - len(text[pos:].lstrip())
            raise FormulaError("unexpected character", position=pos + stripped, token=text[pos + stripped])
        kind = match.lastgroup
        tokens.append(_Token(kind, match.group(kind), match.start(kind)))
        pos = match.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


@dataclass
class _Parser:
    text: str
    tokens: List[_Token] = field(default_factory=list)
    index: int = 0

    def __post_init__(self):
        self.tokens = _tokenize(self.text)

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def _peek(self, offset: int = 1) -> _Token:
        return self.tokens[min(self.index + offset, len(self.tokens) - 1)]

    def _fail(self, message: str, token: Optional[_Token] = None):
        token = token or self.current
        raise FormulaError(message, position=token.position, token=token.text or "<end>")

    def _advance(self) -> _Token:
        token = self.current
        self.index += 1
        return token

    def _expect(self, text: str) -> _Token:
        if self.current.text != text:
            self._fail(f"expected {text!r}")
        return self._advance()

    def _name(self) -> str:
        if self.current.kind != "name":
            self._fail("expected a variable name")
        return self._advance().text

    def parse(self) -> ModelSpec:
        response = "value"
        if self.current.kind == "name" and self._peek().text == "~":
            response = self._advance().text
            self._advance()
        intercept = True
        fixed: List[FixedTerm] = []
        randoms: List[RandomLevel] = []
        seen = set()

        def add(item, token):
            key = item.label()
            if key in seen:
                self._fail(f"duplicate term {key}", token)
            seen.add(key)
            (randoms if isinstance(item, RandomLevel) else fixed).append(item)

        sign = "+"
        if self.current.text == "-":
            sign = self._advance().text
        while True:
            token = self.current
            if sign == "-":
                if token.text != "1":
                    self._fail("only '1' may be subtracted")
                self._advance()
                intercept = False
            elif token.text in ("0", "1") and self._peek().text in ("+", "-", "", ")"):
                self._advance()
                intercept = token.text == "1" and intercept
            elif token.text == "(":
                add(self._random(), token)
            else:
                add(self._product(), token)
            if self.current.text in ("+", "-"):
                sign = self._advance().text
                continue
            if self.current.kind != "end":
                self._fail("expected '+' or end of formula")
            break
        return ModelSpec(tuple(fixed), tuple(randoms), intercept, response)

    def _atom(self):
        token = self.current
        name = self._name()
        if self.current.text != "(":
            if name in _FUNCTIONS:
                self._fail(f"{name} needs an argument")
            return LinearTerm(name)
        if name not in _FUNCTIONS:
            self._fail(f"unknown function {name!r}", token)
        self._advance()
        covariate = self._name()
        knots = DEFAULT_KNOTS
        if self.current.text == ",":
            self._advance()
            if name != "np":
                self._fail(f"{name}() takes one argument")
            key = self.current
            if self._name() != "knots":
                self._fail("only 'knots=' is accepted", key)
            self._expect("=")
            number = self.current
            if number.kind != "num" or "." in number.text or int(number.text) < 1:
                self._fail("knots must be a positive integer")
            knots = int(self._advance().text)
        self._expect(")")
        if name == "lin":
            return LinearTerm(covariate)
        if name == "hyper":
            return SerialTerm(covariate)
        return NonparametricTerm(covariate, knots)

    def _product(self) -> FixedTerm:
        left = self._atom()
        if self.current.text != ":":
            return left
        colon = self._advance()
        right = self._atom()
        if isinstance(left, NonparametricTerm) and not isinstance(right, NonparametricTerm):
            left, right = right, left
        if not isinstance(right, NonparametricTerm) or isinstance(left, NonparametricTerm):
            self._fail("interactions pair a linear or hyper() term with one np() term", colon)
        return InteractionTerm(left, right)

    def _random(self) -> RandomLevel:
        self._expect("(")
        intercept = True
        slope = None
        if self.current.text in ("0", "1"):
            lead = self._advance().text
            if self.current.text == "+":
                self._advance()
                intercept = lead == "1"
                slope = self._atom()
            elif lead == "0":
                self._fail("a random level needs at least one column")
        else:
            slope = self._atom()
        if isinstance(slope, NonparametricTerm):
            self._fail("np() terms cannot be random slopes")
        self._expect("|")
        grouping = self._name()
        self._expect(")")
        return RandomLevel(grouping, intercept, slope)


def parse_formula(text: str) -> ModelSpec:
    """Parse a model formula; raises FormulaError with position and token."""
    if not text or not text.strip():
        raise FormulaError("empty formula", position=0, token="<end>")
    return _Parser(text).parse()
