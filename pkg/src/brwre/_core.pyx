# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled snake kernels; mirrors ``_pycore`` draw for draw."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t, uint8_t
from libc.stdlib cimport malloc, realloc, free

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t CHILD_SALT = 0x632BE59BD9B4E019ULL
cdef uint64_t SALT_ROOT = 0xD1B54A32D192ED03ULL
cdef uint64_t SALT_TREE = 0x8CB92BA72F3D8DD7ULL
cdef uint64_t SALT_OFF = 0xA0761D6478BD642FULL
cdef uint64_t SALT_MOVE = 0xE7037ED1A0B428DBULL
cdef uint64_t SALT_SPINE = 0x8EBC6AF09C88C6E3ULL
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double unif(uint64_t z) nogil:
    return <double>(z >> 11) * INV_2_53


cdef inline uint64_t child_key(uint64_t key, int64_t i) nogil:
    return mix64((key ^ CHILD_SALT) + GOLDEN * <uint64_t>(i + 1))


cdef inline int64_t draw(const double* cum, double u) nogil:
    cdef int64_t k = 0
    while u >= cum[k]:
        k += 1
    return k


cdef struct Stack:
    int64_t* site
    uint64_t* key
    uint8_t* root
    int64_t size
    int64_t cap


cdef int stack_init(Stack* st) nogil:
    st.cap = 1024
    st.size = 0
    st.site = <int64_t*> malloc(st.cap * sizeof(int64_t))
    st.key = <uint64_t*> malloc(st.cap * sizeof(uint64_t))
    st.root = <uint8_t*> malloc(st.cap * sizeof(uint8_t))
    if st.site == NULL or st.key == NULL or st.root == NULL:
        return -1
    return 0


cdef int stack_push(Stack* st, int64_t site, uint64_t key, uint8_t root) nogil:
    cdef int64_t newcap
    cdef int64_t* s2
    cdef uint64_t* k2
    cdef uint8_t* r2
    if st.size == st.cap:
        newcap = st.cap * 2
        s2 = <int64_t*> realloc(st.site, newcap * sizeof(int64_t))
        if s2 == NULL:
            return -1
        st.site = s2
        k2 = <uint64_t*> realloc(st.key, newcap * sizeof(uint64_t))
        if k2 == NULL:
            return -1
        st.key = k2
        r2 = <uint8_t*> realloc(st.root, newcap * sizeof(uint8_t))
        if r2 == NULL:
            return -1
        st.root = r2
        st.cap = newcap
    st.site[st.size] = site
    st.key[st.size] = key
    st.root[st.size] = root
    st.size += 1
    return 0


cdef void stack_free(Stack* st) nogil:
    free(st.site)
    free(st.key)
    free(st.root)


cdef inline int64_t step(int64_t site, uint64_t key, const double* cm, int64_t width,
                         bint uniform, const int64_t* offsets) nogil:
    cdef const double* row = cm if uniform else cm + site * width
    return site + offsets[draw(row, unif(mix64(key ^ SALT_MOVE)))]


def run_snakes(uint64_t master_seed, int64_t first, int64_t n,
               const double[:, ::1] cum_move, const int64_t[::1] offsets,
               const uint8_t[::1] killed, int64_t origin,
               const double[::1] cum_q, const double[::1] cum_sb,
               int64_t node_cap, const double[:, ::1] spine_weights):
    cdef int64_t n_w = spine_weights.shape[0]
    cdef int64_t width = cum_move.shape[1]
    cdef bint uniform = cum_move.shape[0] == 1
    counts_a = np.zeros(n, dtype=np.int64)
    particles_a = np.zeros(n, dtype=np.int64)
    length_a = np.zeros(n, dtype=np.int64)
    censored_a = np.zeros(n, dtype=np.uint8)
    sums_a = np.zeros((n, n_w), dtype=np.float64)
    cdef int64_t[::1] counts = counts_a
    cdef int64_t[::1] particles = particles_a
    cdef int64_t[::1] lengths = length_a
    cdef uint8_t[::1] censored = censored_a
    cdef double[:, ::1] sums = sums_a
    cdef const double* cm = &cum_move[0, 0]
    cdef const int64_t* offs = &offsets[0]
    cdef const double* cq = &cum_q[0]
    cdef const double* csb = &cum_sb[0]
    cdef Stack st
    cdef int64_t r, j, c, k, kk, spine_child, x, y, z, count, nodes, length
    cdef uint64_t seed, s, key, ck
    cdef bint cens
    if stack_init(&st) != 0:
        stack_free(&st)
        raise MemoryError()
    try:
        with nogil:
            for r in range(n):
                if killed[origin]:
                    continue
                seed = mix64(master_seed ^ mix64(<uint64_t>(first + r + 1) * GOLDEN))
                s = mix64(seed ^ SALT_ROOT)
                x = origin
                count = 0
                nodes = 0
                length = 0
                cens = False
                while True:
                    length += 1
                    for j in range(n_w):
                        sums[r, j] += spine_weights[j, x]
                    nodes += 1
                    if x == origin:
                        count += 1
                    k = draw(csb, unif(mix64(s ^ SALT_OFF)))
                    spine_child = <int64_t>(unif(mix64(s ^ SALT_SPINE)) * k)
                    if spine_child > k - 1:
                        spine_child = k - 1
                    st.size = 0
                    for c in range(k):
                        if c == spine_child:
                            continue
                        ck = child_key(s, c)
                        y = step(x, ck, cm, width, uniform, offs)
                        if not killed[y]:
                            if stack_push(&st, y, ck, 0) != 0:
                                with gil:
                                    raise MemoryError()
                    while st.size > 0:
                        st.size -= 1
                        y = st.site[st.size]
                        key = st.key[st.size]
                        nodes += 1
                        if nodes > node_cap:
                            cens = True
                            break
                        if y == origin:
                            count += 1
                        kk = draw(cq, unif(mix64(key ^ SALT_OFF)))
                        for c in range(kk):
                            ck = child_key(key, c)
                            z = step(y, ck, cm, width, uniform, offs)
                            if not killed[z]:
                                if stack_push(&st, z, ck, 0) != 0:
                                    with gil:
                                        raise MemoryError()
                    if cens:
                        break
                    s = child_key(s, spine_child)
                    x = step(x, s, cm, width, uniform, offs)
                    if killed[x]:
                        break
                counts[r] = count
                particles[r] = nodes
                lengths[r] = length
                censored[r] = cens
    finally:
        stack_free(&st)
    return counts_a, particles_a, length_a, censored_a, sums_a


def run_trees(uint64_t master_seed, int64_t first, int64_t n, int64_t start,
              const double[::1] root_cum, const double[::1] cum_q,
              const double[:, ::1] cum_move, const int64_t[::1] offsets,
              const uint8_t[::1] killed, int64_t target, int64_t node_cap, bint stop_on_hit):
    cdef int64_t width = cum_move.shape[1]
    cdef bint uniform = cum_move.shape[0] == 1
    counts_a = np.zeros(n, dtype=np.int64)
    particles_a = np.zeros(n, dtype=np.int64)
    censored_a = np.zeros(n, dtype=np.uint8)
    cdef int64_t[::1] counts = counts_a
    cdef int64_t[::1] particles = particles_a
    cdef uint8_t[::1] censored = censored_a
    cdef const double* cm = &cum_move[0, 0]
    cdef const int64_t* offs = &offsets[0]
    cdef const double* cq = &cum_q[0]
    cdef const double* croot = &root_cum[0]
    cdef Stack st
    cdef int64_t r, c, kk, y, z, count, nodes
    cdef uint64_t seed, key, ck
    cdef uint8_t is_root
    cdef bint cens
    if stack_init(&st) != 0:
        stack_free(&st)
        raise MemoryError()
    try:
        with nogil:
            for r in range(n):
                if killed[start]:
                    continue
                seed = mix64(master_seed ^ mix64(<uint64_t>(first + r + 1) * GOLDEN))
                st.size = 0
                stack_push(&st, start, mix64(seed ^ SALT_TREE), 1)
                count = 0
                nodes = 0
                cens = False
                while st.size > 0:
                    st.size -= 1
                    y = st.site[st.size]
                    key = st.key[st.size]
                    is_root = st.root[st.size]
                    nodes += 1
                    if nodes > node_cap:
                        cens = True
                        break
                    if y == target:
                        count += 1
                        if stop_on_hit:
                            break
                    kk = draw(croot if is_root else cq, unif(mix64(key ^ SALT_OFF)))
                    for c in range(kk):
                        ck = child_key(key, c)
                        z = step(y, ck, cm, width, uniform, offs)
                        if not killed[z]:
                            if stack_push(&st, z, ck, 0) != 0:
                                with gil:
                                    raise MemoryError()
                counts[r] = count
                particles[r] = nodes
                censored[r] = cens
    finally:
        stack_free(&st)
    return counts_a, particles_a, censored_a
