# Generated by Django 5.2.5 on 2026-10-18 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='Run',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(choices=[('PHANTOM', 'phantom'), ('CONTRAST', 'contrast'), ('AUGMENT', 'augment'), ('TRAIN', 'train'), ('PREDICT', 'predict'), ('EVAL', 'eval'), ('SLICE2D', 'slice2d'), ('EXPERIMENT', 'experiment')], max_length=20)),
                ('config_hash', models.CharField(db_index=True, max_length=64)),
                ('config_text', models.TextField(help_text='Canonical `key = value` rendering of the validated RunConfig.')),
                ('run_dir', models.CharField(max_length=1024, unique=True)),
                ('seed', models.BigIntegerField(default=0)),
                ('status', models.CharField(choices=[('PENDING', 'Pending'), ('PROCESSING', 'Processing'), ('COMPLETED', 'Completed'), ('FAILED', 'Failed')], default='PENDING', max_length=10)),
                ('manifest', models.JSONField(default=dict, help_text='Every file the run emitted, relative to run_dir.')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='ExperimentCell',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('matrix', models.CharField(choices=[('MODALITIES', 'Input modality combinations'), ('AUGMENTATION', 'Augmentation on/off'), ('AXES', '2D slicing axes')], max_length=20)),
                ('label', models.CharField(max_length=100)),
                ('settings', models.JSONField(default=dict, help_text="RunConfig overrides of this cell, e.g., {'modalities': 'opp,wat'}")),
                ('status', models.CharField(choices=[('PENDING', 'Pending'), ('PROCESSING', 'Processing'), ('COMPLETED', 'Completed'), ('FAILED', 'Failed')], default='PENDING', max_length=10)),
                ('mean_dice', models.FloatField(blank=True, null=True)),
                ('sd_dice', models.FloatField(blank=True, null=True)),
                ('mean_hd', models.FloatField(blank=True, null=True)),
                ('sd_hd', models.FloatField(blank=True, null=True)),
                ('wall_time', models.FloatField(blank=True, help_text='Seconds.', null=True)),
                ('error', models.TextField(blank=True, default='')),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='cells', to='experiments.run')),
            ],
            options={
                'ordering': ['id'],
            },
        ),
        migrations.CreateModel(
            name='RunEvent',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('event_type', models.CharField(choices=[('RUN_STARTED', 'Run Started'), ('RUN_COMPLETED', 'Run Completed'), ('RUN_FAILED', 'Run Failed'), ('CHECKPOINT_WRITTEN', 'Checkpoint Written'), ('CELL_COMPLETED', 'Experiment Cell Completed'), ('CELL_FAILED', 'Experiment Cell Failed')], max_length=30)),
                ('details', models.JSONField(default=dict, help_text="Details of the event, e.g., {'file': 'best.mck'}")),
                ('timestamp', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='events', to='experiments.run')),
            ],
            options={
                'ordering': ['-timestamp'],
            },
        ),
    ]
