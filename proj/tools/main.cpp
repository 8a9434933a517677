#include "spiraldiff/schedule.hpp"

#include <iostream>

int main() {
    std::cout << "spiraldiff CLI placeholder\n";
    return 0;
}
