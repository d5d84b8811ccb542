from mvgrid_edit.cli import main

if __name__ == "__main__":
    main()
