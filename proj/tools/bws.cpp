#include <cstdio>

int main() {
  std::puts("bws: placeholder");
  return 0;
}
