#include <gtest/gtest.h>

#include "qrc/rng.hpp"

using qrc::Rng;

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SplitStreamsDiffer) {
    Rng root(7);
    Rng init = root.split("init");
    Rng data = root.split("data");
    Rng sampling = root.split("sampling");
    EXPECT_NE(init.next_u64(), data.next_u64());
    EXPECT_NE(data.next_u64(), sampling.next_u64());
    // splitting does not advance the parent
    EXPECT_EQ(root.state(), Rng(7).state());
}

TEST(Rng, SplitIsDeterministic) {
    Rng a = Rng(9).split("data").split(3);
    Rng b = Rng(9).split("data").split(3);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformInRange) {
    Rng r(1);
    for (int i = 0; i < 1000; ++i) {
        double v = r.uniform(-2.0, 3.0);
        EXPECT_GE(v, -2.0);
        EXPECT_LT(v, 3.0);
    }
}

TEST(Rng, NormalMoments) {
    Rng r(5);
    const int n = 20000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
        double v = r.normal();
        sum += v;
        sq += v * v;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.03);
    EXPECT_NEAR(sq / n, 1.0, 0.05);
}

TEST(Rng, UniformIntCoversRange) {
    Rng r(11);
    std::vector<int> hits(5, 0);
    for (int i = 0; i < 5000; ++i) ++hits[r.uniform_int(5)];
    for (int h : hits) EXPECT_GT(h, 800);
}
