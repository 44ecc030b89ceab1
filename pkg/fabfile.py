"""
Fabric fabfile for the pimgpt simulator.

Run `pip install -r requirements_dev.txt`, then `fab --list` to see available commands.
"""

from fabric.api import local, lcd, with_settings


def test(module=''):
    """Run unit tests; optionally only one module, e.g. fab test:engine"""
    if module:
        local('python -m unittest -v tests.test_%s' % module)
    else:
        local('python -m unittest discover -v -s tests')
unittest = test


@with_settings(warn_only=True)
def pep8():
    """Check source for PEP8 conformance."""
    local('pycodestyle --max-line-length=120 pimgpt tests')


def lint(fmt='colorized'):
    """Run PyLint on the package."""
    local('pylint -f %s pimgpt || true' % fmt)
pylint = lint


def precommit():
    """Style checks, error-only lint and the unit tests."""
    pep8()
    local('pylint -f colorized --errors-only pimgpt')
    test()


def validate():
    """Config check plus a short detailed run with the trace checker."""
    local('python -m pimgpt validate')


def numerics():
    """BF16 block error table."""
    local('python -m pimgpt numerics report')


def acceptance():
    """Full-size 1024-token runs of the catalog: row hits, data movement, ASIC share, runtime."""
    local('PIMGPT_ACCEPTANCE=1 python -m unittest -v tests.test_acceptance')


def sweeps(tokens=1024, out='sweeps'):
    """Reproduce the standard parameter sweeps as CSV files under `out`."""
    local('mkdir -p %s' % out)
    models = 'gpt2-small,gpt2-medium,gpt2-large,gpt2-xl,gpt3-small,gpt3-medium,gpt3-large,gpt3-xl'
    for dim, values in (('asic_freq', '1e9,5e8,2e8,1e8'), ('pin_rate', '16,8,4,2'),
                        ('mac_width', '16,32,64'), ('channels', '8,16,32')):
        local('python -m pimgpt sweep %s %s --model %s --tokens %s --jobs 4 --out %s/%s.csv'
              % (dim, values, models, tokens, out, dim))


def clean():
    """Clean up generated files."""
    local('rm -rf dist build *.egg-info')
    local('find . -name "*.pyc" -delete')
    with lcd('docs'):
        local('rm -rf _build')


def doc(fmt='html'):
    """Build Sphinx documentation."""
    with lcd('docs'):
        local('sphinx-build -b %s . _build/%s' % (fmt, fmt))
docs = doc
