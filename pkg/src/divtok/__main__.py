from divtok.cli import main

main()
