"""Chemical element symbols indexed by atomic number."""

SYMBOLS = (
    "X",
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
)

ATOMIC_NUMBERS = {s: z for z, s in enumerate(SYMBOLS) if z > 0}


def atomic_number(token: str) -> int:
    """Atomic number from an element symbol or a bare integer string."""
    if token.isdigit():
        return int(token)
    try:
        return ATOMIC_NUMBERS[token.capitalize()]
    except KeyError:
        raise ValueError(f"unknown element symbol {token!r}") from None


def symbol(z: int) -> str:
    if 1 <= z < len(SYMBOLS):
        return SYMBOLS[z]
    return str(z)
