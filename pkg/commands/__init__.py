from commands import detect, report, sweep, synth, train, uq

COMMANDS = (synth, train, detect, sweep, uq, report)
