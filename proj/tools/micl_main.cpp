#include <cstdio>

int main() {
    std::puts("micl: CLI under construction");
    return 0;
}
