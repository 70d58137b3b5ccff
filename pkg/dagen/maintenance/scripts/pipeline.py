# -*- coding: utf-8 -*-
import json
import sys

import os
from pyramid.paster import (
    get_appsettings,
    setup_logging,
    )
from pyramid.scripts.common import parse_vars
from pyramid.settings import aslist

from dagen.base.errors import DagenError, PipelineError, format_error

# var=value pairs that go to the stage instead of the config
STAGE_OPTIONS = {
    "generate": {"checkpoint": "checkpoint", "condition_source": "condition_source", "manifest": "manifest_path"},
    "replay": {"manifest": "manifest_path", "out_dir": "out_dir"},
    "refine": {"manifests": "manifests", "lambda": "lam", "name": "name"},
    "sweep-lambda": {"manifests": "manifests"},
    "metrics": {"manifest": "manifest_path"},
    "evaluate": {"checkpoint": "reference"},
}


def usage(argv):
    cmd = os.path.basename(argv[0])
    print('usage: %s <config_uri> <stage> [var=value]\n'
          'stages: make-data train-seg prepare pretrain-dm train-dm generate replay\n'
          '        refine sweep-lambda metrics evaluate\n'
          '(example: "%s development.ini generate checkpoint=initial condition_source=target_prior dm.steps=200")'
          % (cmd, cmd))
    sys.exit(1)


def split_vars(stage, variables):
    """(config overrides, stage keyword arguments)"""
    known = STAGE_OPTIONS.get(stage, {})
    overrides, kwargs = {}, {}
    for key, value in variables.items():
        if key in known:
            kwargs[known[key]] = value
        elif key == "out":
            overrides["paths.out"] = value
        else:
            overrides[key] = value
    if "manifests" in kwargs:
        kwargs["manifests"] = aslist(kwargs["manifests"].replace(",", " "))
    if "lam" in kwargs:
        try:
            kwargs["lam"] = float(kwargs["lam"])
        except ValueError:
            raise PipelineError("lambda must be a number, got %r" % kwargs["lam"])
    if stage in ("refine", "sweep-lambda") and not kwargs.get("manifests"):
        raise PipelineError("%s needs manifests=<path>[,<path>...]" % stage)
    if stage == "replay" and not ("manifest_path" in kwargs and "out_dir" in kwargs):
        raise PipelineError("replay needs manifest=<path> and out_dir=<directory>")
    return overrides, kwargs


def summarize(result):
    if isinstance(result, (dict, list, str, int, float)) or result is None:
        return result
    if hasattr(result, "keys"):
        return dict(result)
    if hasattr(result, "path"):
        return {"manifest": result.path, "records": len(result)}
    return str(result)


def main(argv=sys.argv):
    if len(argv) < 3:
        usage(argv)
    config_uri, stage = argv[1], argv[2]
    try:
        overrides, kwargs = split_vars(stage, parse_vars(argv[3:]))
        setup_logging(config_uri)
        settings = get_appsettings(config_uri)
        settings.update(overrides)

        import dagen
        pipeline = dagen.main({}, **settings)
        result = pipeline.run(stage, **kwargs)
    except DagenError as e:
        print(format_error(e), file=sys.stderr)
        sys.exit(e.code)
    print(json.dumps(summarize(result), indent=2, sort_keys=True, default=str))
