#include <iostream>

int main() {
  std::cout << "caresep cli placeholder\n";
  return 0;
}
