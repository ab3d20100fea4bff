"""YAML model configuration files.

Example::

    format: dhglm-model
    version: 1
    family: {tag: poisson}
    mean:
      link: log
      terms: {beta0: '1', beta1: x}
      random: {group: obs, precision: dispersion, precision_name: tau}
    dispersion:
      level: observation
      terms: {gamma0: '1', gamma1: z}
    priors:
      coefficient: {mean: 0.0, precision: 0.001}
      precision: {shape: 1.0, rate: 5.0e-05}
    conditioning: auto

Unknown keys are rejected so that typos do not silently change a model.
"""

from pathlib import Path

import yaml

from .model import (LikelihoodFamily, LinearPredictor, Priors, RandomEffect, SpecError,
                    build_spec)

FORMAT = "dhglm-model"
VERSION = 1


def _check_keys(section, allowed, where):
    extra = set(section) - set(allowed)
    if extra:
        raise SpecError(f"unknown keys in {where}: {sorted(extra)}")


def _random_to_dict(re):
    if re is None:
        return None
    out = {"group": re.group, "covariate": re.covariate, "precision": re.precision,
           "precision_name": re.precision_name}
    if re.precision_terms:
        out["precision_terms"] = dict(re.precision_terms)
    return out


def _predictor_to_dict(lp):
    if lp is None:
        return None
    return {
        "link": lp.link,
        "level": lp.level,
        "offset": lp.offset,
        "terms": {name: col for name, col in lp.terms},
        "random": _random_to_dict(lp.random),
    }


def spec_to_config(spec, conditioning="auto"):
    pri = spec.priors
    return {
        "format": FORMAT,
        "version": VERSION,
        "family": {"tag": spec.family.tag, "nuisance": spec.family.nuisance,
                   "known_column": spec.family.known_column},
        "mean": _predictor_to_dict(spec.mean),
        "dispersion": _predictor_to_dict(spec.dispersion),
        "priors": {
            "coefficient": {"mean": pri.coefficient[0], "precision": pri.coefficient[1]},
            "precision": {"shape": pri.precision[0], "rate": pri.precision[1]},
            "overrides": {name: list(vals) for name, vals in pri.overrides},
        },
        "conditioning": conditioning,
    }


def _random_from_dict(d, where):
    if d is None:
        return None
    _check_keys(d, ("group", "covariate", "precision", "precision_name", "precision_terms"), where)
    return RandomEffect(
        group=d.get("group", "obs"),
        covariate=d.get("covariate"),
        precision=d.get("precision", "free"),
        precision_name=d.get("precision_name", "tau_u"),
        precision_terms=tuple((d.get("precision_terms") or {}).items()),
    )


def _predictor_from_dict(d, where, default_link):
    if d is None:
        return None
    _check_keys(d, ("link", "level", "offset", "terms", "random"), where)
    terms = d.get("terms") or {}
    if not isinstance(terms, dict):
        raise SpecError(f"{where}.terms must map coefficient names to columns")
    return LinearPredictor(
        terms=tuple((str(k), str(v)) for k, v in terms.items()),
        link=d.get("link", default_link),
        offset=d.get("offset"),
        random=_random_from_dict(d.get("random"), f"{where}.random"),
        level=d.get("level", "observation"),
    )


def spec_from_config(config, data):
    """Build ``(spec, conditioning)`` from a parsed config and a dataset."""
    _check_keys(config, ("format", "version", "family", "mean", "dispersion", "priors", "conditioning"), "config")
    if config.get("format") != FORMAT:
        raise SpecError(f"not a {FORMAT} file (format={config.get('format')!r})")
    if config.get("version") != VERSION:
        raise SpecError(f"unsupported config version {config.get('version')!r}; expected {VERSION}")
    fam = config["family"]
    _check_keys(fam, ("tag", "nuisance", "known_column"), "family")
    family = LikelihoodFamily(fam["tag"], fam.get("nuisance"), fam.get("known_column"))
    mean_link = "identity" if family.tag == "gaussian" else "log"
    mean = _predictor_from_dict(config["mean"], "mean", mean_link)
    disp = _predictor_from_dict(config.get("dispersion"), "dispersion", "log")
    p = config.get("priors") or {}
    _check_keys(p, ("coefficient", "precision", "overrides"), "priors")
    coef = p.get("coefficient") or {}
    prec = p.get("precision") or {}
    priors = Priors(
        coefficient=(coef.get("mean", 0.0), coef.get("precision", 0.001)),
        precision=(prec.get("shape", 1.0), prec.get("rate", 0.00005)),
        overrides=tuple((k, tuple(v)) for k, v in (p.get("overrides") or {}).items()),
    )
    spec = build_spec(family, mean, disp, priors, data)
    return spec, config.get("conditioning", "auto")


def dump_config(spec, path=None, conditioning="auto"):
    text = yaml.safe_dump(spec_to_config(spec, conditioning), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def load_config(source, data):
    """Parse YAML text or a file path into ``(spec, conditioning)``."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
        source = Path(source).read_text()
    config = yaml.safe_load(source)
    if not isinstance(config, dict):
        raise SpecError("model config must be a mapping")
    return spec_from_config(config, data)
