# package initialization
