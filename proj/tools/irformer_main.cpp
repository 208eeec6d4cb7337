#include <cstdio>

int main() {
  std::puts("irformer: CLI under construction");
  return 1;
}
