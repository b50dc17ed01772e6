#include <doctest.h>

#include "evalnet/tensor.hpp"

using namespace evalnet;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("factories fill shape and data") {
    Tensor z = Tensor::zeros({2, 3});
    CHECK(z.rank() == 2);
    CHECK(z.size() == 6);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(z.at(i) == 0.0);

    Tensor f = Tensor::full({4}, 2.5);
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(f.at(i) == 2.5);

    Tensor d = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    CHECK(d.at(3) == 4.0);
    CHECK(Tensor::scalar(7.0).item() == 7.0);
}

TEST_CASE("from_data rejects length mismatch") {
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("item requires a single element") {
    CHECK_THROWS_AS(Tensor::zeros({2}).item(), ShapeError);
}

TEST_CASE("copies share the buffer, clone does not") {
    Tensor a = Tensor::from_data({2}, {1, 2});
    Tensor b = a;
    b.mutable_data()[0] = 9;
    CHECK(a.at(0) == 9.0);

    Tensor c = a.clone();
    c.mutable_data()[0] = -1;
    CHECK(a.at(0) == 9.0);
    CHECK_FALSE(c.tracked());
}

TEST_CASE("rng streams are deterministic per seed") {
    Rng a(7), b(7), c(8);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const double va = a.uniform();
        all_equal = all_equal && va == b.uniform();
        any_diff = any_diff || va != c.uniform();
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("uniform stays inside its interval") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.uniform();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("shuffle is a deterministic permutation") {
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<int> w = v;
    Rng a(11), b(11);
    a.shuffle(v);
    b.shuffle(w);
    CHECK(v == w);
    std::sort(w.begin(), w.end());
    CHECK(w == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("randn draws are seeded and scale with stddev") {
    Rng a(5), b(5);
    Tensor x = Tensor::randn({64}, a, 1.0);
    Tensor y = Tensor::randn({64}, b, 2.0);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == doctest::Approx(2.0 * x.at(i)));
}

TEST_CASE("float32 mode rounds stored values") {
    PrecisionGuard g(Precision::Float32);
    CHECK(store_round(0.1) == static_cast<double>(0.1f));
    {
        PrecisionGuard inner(Precision::Float64);
        CHECK(store_round(0.1) == 0.1);
    }
    CHECK(precision() == Precision::Float32);
}

TEST_CASE("tape scoping controls recording") {
    CHECK(active_tape() == nullptr);
    Tape tape;
    {
        TapeScope scope(tape);
        CHECK(active_tape() == &tape);
        {
            NoGradScope ng;
            CHECK(active_tape() == nullptr);
        }
        CHECK(active_tape() == &tape);
    }
    CHECK(active_tape() == nullptr);
}

TEST_SUITE_END();
