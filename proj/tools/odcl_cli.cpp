#include <cstdio>

int main() {
  std::puts("odcl: pipeline CLI (under construction)");
  return 0;
}
