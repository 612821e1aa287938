import os

from django import forms
from django.core.exceptions import ImproperlyConfigured, ValidationError

from hmlet.model import VARIANT_NAMES
from hmlet.numerics import ACTIVATIONS
from hmlet.trainer import TEMPERATURE_SCHEDULES, TrainConfig
from hmlet.utils import SEED_ENVIRON, get_setting, merge_config, read_config_file


def _choices(values):
    return [(value, value) for value in values]


class RunConfigForm(forms.Form):
    """
    Validates the merged run configuration. Values may arrive as strings from a config file or
    the environment; the fields convert them.
    """
    learning_rate = forms.FloatField(min_value=0.0)
    lambda_l2 = forms.FloatField(min_value=0.0)
    batch_size = forms.IntegerField(min_value=1)
    dropout_rate = forms.FloatField(min_value=0.0)
    tau0 = forms.FloatField()
    tau_min = forms.FloatField()
    tau_decay = forms.FloatField(max_value=1.0)
    max_epochs = forms.IntegerField(min_value=1)
    patience = forms.IntegerField(min_value=1)
    dim = forms.IntegerField(min_value=1)
    seed = forms.IntegerField(min_value=0, max_value=2 ** 64 - 1)
    variant = forms.ChoiceField(choices=_choices(VARIANT_NAMES))
    activation = forms.ChoiceField(choices=_choices(ACTIVATIONS))
    hidden_gate = forms.BooleanField(required=False)
    temperature_schedule = forms.ChoiceField(choices=_choices(TEMPERATURE_SCHEDULES))
    eval_k = forms.IntegerField(min_value=1)
    threads = forms.IntegerField(min_value=1)

    def clean_dropout_rate(self):
        rate = self.cleaned_data['dropout_rate']
        if rate >= 1.0:
            raise ValidationError("The dropout rate must be smaller than 1.")
        return rate

    def clean_tau_decay(self):
        decay = self.cleaned_data['tau_decay']
        if decay <= 0.0:
            raise ValidationError("The temperature decay must be positive.")
        return decay

    def clean(self):
        cleaned_data = super().clean()
        tau0, tau_min = cleaned_data.get('tau0'), cleaned_data.get('tau_min')
        if tau0 is not None and tau_min is not None and not tau0 >= tau_min > 0:
            raise ValidationError("Temperatures must satisfy tau0 >= tau_min > 0.")
        return cleaned_data

    def train_config(self):
        return TrainConfig(**self.cleaned_data)


def load_run_config(options=None, config_file=None):
    """
    Merge, in increasing precedence, the built-in defaults, ``settings.HMLET_DEFAULTS``, the config
    file, the ``HMLET_SEED`` environment variable and explicit ``options``, then validate.
    """
    allowed = TrainConfig.field_names()
    project_defaults = get_setting('DEFAULTS', {})
    unknown = set(project_defaults).difference(allowed)
    if unknown:
        raise ImproperlyConfigured(f"HMLET_DEFAULTS contains unknown keys: {', '.join(sorted(unknown))}.")
    from_file = read_config_file(config_file, allowed) if config_file else {}
    from_environ = {'seed': os.environ[SEED_ENVIRON]} if os.environ.get(SEED_ENVIRON) else {}
    from_options = {key: value for key, value in (options or {}).items() if key in allowed}
    data = merge_config(TrainConfig().as_dict(), project_defaults, from_file, from_environ, from_options)
    form = RunConfigForm(data=data)
    if not form.is_valid():
        raise ImproperlyConfigured(f"Invalid run configuration:\n{form.errors.as_text()}")
    return form.train_config()
