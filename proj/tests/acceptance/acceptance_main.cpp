#include <cstdio>
int main() { std::puts("acceptance: criteria pending"); return 1; }
