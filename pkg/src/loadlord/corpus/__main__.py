from . import rebuild

for p in rebuild():
    print(p)
